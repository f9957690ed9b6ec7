"""Experiment orchestration: the outer annotation loop (train, score, select,
promote) around the inner semi-supervised co-training loop.

Every run owns independent seeded RNG streams per purpose (data, split,
weight init, batch order/augmentation, perturbation noise, selection), so two
runs with the same config and master seed produce byte-identical logs, and
runs that differ only in query strategy share their training trace up to the
first promotion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from . import losses, metrics, sampler, synthdata
from .autograd import Tensor
from .config import (STREAM_DATA, STREAM_NOISE, STREAM_SELECTION, STREAM_SPLIT,
                     STREAM_STUDENT_INIT, STREAM_TEACHER_INIT, STREAM_TRAIN,
                     RunConfig)
from .errors import ConfigError, ContractError, InvariantError
from .nets import SGD, SegNet, SegNetSpec
from .pool import SamplePool


@dataclass
class ModelPair:
    """The two co-trained networks and their optimizer states."""

    student: SegNet
    teacher: Optional[SegNet]
    opt_student: SGD
    opt_teacher: Optional[SGD]


@dataclass
class RoundState:
    round_index: int
    budget: int
    epochs: int
    iterations: int
    best_val_dsc: float
    best_val_hd: float
    best_state: List[np.ndarray] = field(repr=False, default_factory=list)


@dataclass
class Streams:
    train: np.random.Generator
    noise: np.random.Generator


def build_model_pair(cfg: RunConfig, with_teacher: bool = True) -> ModelPair:
    size = cfg.data.image_size
    student = SegNet(SegNetSpec("student", tuple(cfg.model.student_channels),
                                size, size), seed=cfg.stream_seed(STREAM_STUDENT_INIT))
    opt_s = SGD(student.parameters(), lr=cfg.train.lr, momentum=cfg.train.momentum,
                weight_decay=cfg.train.weight_decay)
    teacher = opt_t = None
    if with_teacher:
        teacher = SegNet(SegNetSpec("teacher", tuple(cfg.model.teacher_channels),
                                    size, size), seed=cfg.stream_seed(STREAM_TEACHER_INIT))
        opt_t = SGD(teacher.parameters(), lr=cfg.train.lr, momentum=cfg.train.momentum,
                    weight_decay=cfg.train.weight_decay)
    return ModelPair(student, teacher, opt_s, opt_t)


def prepare_data(cfg: RunConfig) -> Tuple[Dict[int, synthdata.SynthSample], SamplePool]:
    if cfg.data.dataset_dir is not None:
        samples, _ = synthdata.load_dataset(cfg.data.dataset_dir)
    else:
        samples = synthdata.generate(cfg.data.n_total,
                                     seed=cfg.stream_seed(STREAM_DATA),
                                     size=cfg.data.image_size)
    spec = synthdata.SplitSpec(
        n_train=cfg.data.n_train, n_val=cfg.data.n_val, n_test=cfg.data.n_test,
        init_labeled_fraction=cfg.data.init_labeled_fraction,
        seed=cfg.stream_seed(STREAM_SPLIT))
    pool = synthdata.split(samples, spec)
    return {s.id: s for s in samples}, pool


# ---------------------------------------------------------------------------
# inner loop


def train_round(models: ModelPair, pool: SamplePool,
                samples: Dict[int, synthdata.SynthSample], cfg: RunConfig,
                round_index: int, streams: Streams, loss_rows: List[str],
                val_samples: Sequence[synthdata.SynthSample],
                epochs: Optional[int] = None,
                supervised_only: bool = False) -> RoundState:
    """One training phase over the current pool.

    Per iteration: one augmented labeled batch plus (unless supervised_only)
    one unlabeled batch and its noise-perturbed copy; a single joint backward
    updates both networks. The student is validated every epoch and its best
    weights are kept.
    """
    if not pool.labeled_ids:
        raise ContractError("train_round: labeled pool is empty")
    epochs = cfg.train.epochs_per_round if epochs is None else epochs
    labeled = list(pool.labeled_ids)
    unlabeled = list(pool.unlabeled_ids)
    nl = cfg.train.labeled_batch
    nu = cfg.train.unlabeled_batch
    iters_per_epoch = (len(labeled) + nl - 1) // nl
    total_iters = epochs * iters_per_epoch
    con_params = losses.ConsistencyParams(
        noise_sigma=cfg.loss.noise_sigma, ds_out=cfg.loss.ds_out,
        eps=cfg.loss.eps, stop_teacher_grad=cfg.loss.stop_teacher_grad)

    best = RoundState(round_index=round_index, budget=cfg.budget_per_round,
                      epochs=epochs, iterations=total_iters,
                      best_val_dsc=-1.0, best_val_hd=float("inf"))
    t = 0
    for epoch in range(1, epochs + 1):
        order = [labeled[i] for i in streams.train.permutation(len(labeled))]
        for start in range(0, len(order), nl):
            t += 1
            lam = 0.0 if supervised_only else losses.ramp_up_weight(t, total_iters)
            batch_ids = order[start:start + nl]
            aug = [synthdata.augment_random(samples[i], streams.train)
                   for i in batch_ids]
            xl = np.stack([a.image for a in aug])
            yl = Tensor(np.stack([a.mask for a in aug]))

            if supervised_only:
                logits = models.student.forward(Tensor(xl))
                sup1 = losses.supervised_loss(logits, yl)
                breakdown = losses.LossBreakdown(
                    sup1=sup1.item(), sup2=0.0, semi1=0.0, semi2=0.0,
                    con=0.0, lambda_t=lam, total=sup1.item())
                ag.backward(sup1)
                models.opt_student.step()
                models.opt_student.zero_grad()
            else:
                replace = len(unlabeled) < nu
                upick = streams.train.choice(len(unlabeled), size=nu, replace=replace)
                xu = np.stack([samples[unlabeled[i]].image for i in upick])
                xu_hat = losses.perturb(Tensor(xu), cfg.loss.noise_sigma,
                                        streams.noise)

                s_in = Tensor(np.concatenate([xl, xu], axis=0))
                t_in = Tensor(np.concatenate([xl, xu, xu_hat.data], axis=0))
                ls = models.student.forward(s_in)
                lt = models.teacher.forward(t_in)
                b = len(batch_ids)
                ls_l = ag.narrow(ls, 0, 0, b)
                ls_u = ag.narrow(ls, 0, b, nu)
                lt_l = ag.narrow(lt, 0, 0, b)
                lt_u = ag.narrow(lt, 0, b, nu)
                lt_p = ag.narrow(lt, 0, b + nu, nu)

                sup1 = losses.supervised_loss(ls_l, yl)
                sup2 = losses.supervised_loss(lt_l, yl)
                pseudo_s = losses.make_pseudo_label(ls_u)
                pseudo_t = losses.make_pseudo_label(lt_u)
                semi1 = losses.semi_supervised_loss(ls_u, pseudo_t)
                semi2 = losses.semi_supervised_loss(lt_u, pseudo_s)
                con = losses.consistency_loss(ls_u, lt_p, con_params)
                total, breakdown = losses.total_loss(sup1, sup2, semi1, semi2,
                                                     con, lam)
                ag.backward(total)
                models.opt_student.step()
                models.opt_teacher.step()
                models.opt_student.zero_grad()
                models.opt_teacher.zero_grad()

            loss_rows.append(breakdown.csv_row(round_index, epoch, t))

        dsc = metrics.evaluate_dsc(models.student, val_samples)
        if dsc > best.best_val_dsc:
            best.best_val_dsc = dsc
            best.best_state = models.student.state_arrays()
            best.best_val_hd = float("nan")  # filled below, once per round
    snapshot = models.student.clone()
    snapshot.load_state_arrays(best.best_state)
    best.best_val_dsc, best.best_val_hd = metrics.evaluate(snapshot, val_samples)
    return best


# ---------------------------------------------------------------------------
# selection


def _scoring_views(net: SegNet, samples: Dict[int, synthdata.SynthSample],
                   pool: SamplePool, batch_size: int = 25
                   ) -> Tuple[sampler.PoolView, sampler.LabeledRefs]:
    def run_chunks(ids):
        probs, embs = [], []
        with ag.no_grad():
            for start in range(0, len(ids), batch_size):
                chunk = ids[start:start + batch_size]
                x = Tensor(np.stack([samples[i].image for i in chunk]))
                logits, emb = net.forward_with_embedding(x)
                p = ag.softmax(logits, axis=1)
                probs.extend(p.data[i] for i in range(len(chunk)))
                embs.append(emb.data)
        return probs, np.concatenate(embs, axis=0)

    u_probs, u_embs = run_chunks(pool.unlabeled_ids)
    _, l_embs = run_chunks(pool.labeled_ids)
    view = sampler.PoolView(
        sample_ids=list(pool.unlabeled_ids), probs=u_probs, embeddings=u_embs,
        images=[samples[i].image for i in pool.unlabeled_ids])
    refs = sampler.LabeledRefs(
        embeddings=l_embs, images=[samples[i].image for i in pool.labeled_ids])
    return view, refs


def select_for_round(cfg: RunConfig, round_index: int, pool: SamplePool,
                     samples: Dict[int, synthdata.SynthSample],
                     scoring_net: SegNet
                     ) -> Tuple[List[int], List[sampler.ScoreRecord]]:
    budget = cfg.budget_per_round
    strategy = cfg.al.strategy
    if strategy == "random":
        rng = cfg.stream_rng(STREAM_SELECTION, round_index)
        return sampler.random_select(pool.unlabeled_ids, budget, rng), []
    view, refs = _scoring_views(scoring_net, samples, pool)
    if strategy == "entropy":
        ents = [sampler.predictive_entropy(p) for p in view.probs]
        selected = sampler.entropy_select(view.sample_ids, ents, budget)
        chosen = set(selected)
        records = [sampler.ScoreRecord(sample_id=sid, entropy=e,
                                       selected=sid in chosen)
                   for sid, e in zip(view.sample_ids, ents)]
        return selected, records
    if strategy == "egad":
        params = sampler.SelectionParams(
            budget_b=budget, stage1_fraction=cfg.al.stage1_fraction,
            histogram_bins=cfg.al.histogram_bins, aggregation=cfg.al.aggregation)
        return sampler.egad_select(view, refs, params)
    raise ConfigError(f"no selection step for strategy {strategy!r}")


# ---------------------------------------------------------------------------
# experiments


def _write_outputs(outdir: Path, cfg: RunConfig, metrics_rows: List[str],
                   loss_rows: List[str], score_lines: List[str],
                   history: dict, best_student: SegNet) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.save(outdir / "config.json")
    (outdir / "metrics.csv").write_text(
        "\n".join([metrics.METRICS_CSV_HEADER] + metrics_rows) + "\n")
    (outdir / "losses.csv").write_text(
        "\n".join([losses.LOSS_CSV_HEADER] + loss_rows) + "\n")
    (outdir / "scores.csv").write_text(
        "\n".join([sampler.SCORE_CSV_HEADER] + score_lines) + "\n")
    (outdir / "history.json").write_text(
        json.dumps(history, indent=1, sort_keys=True) + "\n")
    with open(outdir / "checkpoint_best.bin", "wb") as f:
        best_student.save_checkpoint(f)


def run_al_experiment(cfg: RunConfig, outdir: Union[str, Path]) -> dict:
    """Strategy-driven experiment: rounds of train, score, select, promote,
    then a final test evaluation with the last round's best student."""
    if cfg.al.strategy == "supervised":
        return baseline_supervised(cfg, outdir)
    outdir = Path(outdir)
    samples, pool = prepare_data(cfg)
    initial_labeled = list(pool.labeled_ids)
    conserved = set(pool.labeled_ids) | set(pool.unlabeled_ids)
    models = build_model_pair(cfg)
    streams = Streams(train=cfg.stream_rng(STREAM_TRAIN),
                      noise=cfg.stream_rng(STREAM_NOISE))
    val_samples = [samples[i] for i in pool.val_ids]
    test_samples = [samples[i] for i in pool.test_ids]

    metrics_rows: List[str] = []
    loss_rows: List[str] = []
    score_lines: List[str] = []
    state = None
    for round_index in range(1, cfg.al.rounds + 1):
        if round_index > 1 and not cfg.train.warm_start:
            models = build_model_pair(cfg)
        state = train_round(models, pool, samples, cfg, round_index, streams,
                            loss_rows, val_samples)
        metrics_rows.append(metrics.metrics_csv_row(
            round_index, "val", len(val_samples),
            state.best_val_dsc, state.best_val_hd))

        scoring_source = (models.teacher if cfg.model.sampler_source == "teacher"
                          else models.student)
        scoring_net = scoring_source.clone()
        if cfg.model.sampler_source == "student":
            scoring_net.load_state_arrays(state.best_state)
        selected, records = select_for_round(cfg, round_index, pool, samples,
                                             scoring_net)
        score_lines.extend(rec.csv_row(round_index) for rec in records)
        pool.promote(selected)
        if set(pool.labeled_ids) | set(pool.unlabeled_ids) != conserved:
            raise InvariantError("pool conservation violated after promote")

    best_student = models.student.clone()
    best_student.load_state_arrays(state.best_state)
    test_dsc, test_hd = metrics.evaluate(best_student, test_samples)
    metrics_rows.append(metrics.metrics_csv_row(
        cfg.al.rounds, "test", len(test_samples), test_dsc, test_hd))

    history = {
        "initial_labeled": initial_labeled,
        "rounds": pool.history,
        "final_labeled": pool.labeled_ids,
    }
    _write_outputs(outdir, cfg, metrics_rows, loss_rows, score_lines, history,
                   best_student)
    return {
        "strategy": cfg.al.strategy,
        "seed": cfg.seeds.master,
        "final_test_dsc": test_dsc,
        "final_test_hd": test_hd,
        "final_labeled": len(pool.labeled_ids),
        "best_val_dsc": state.best_val_dsc,
    }


def baseline_supervised(cfg: RunConfig, outdir: Union[str, Path]) -> dict:
    """Labeled-only floor: the student alone, trained on the same final label
    budget for the same total number of epochs."""
    outdir = Path(outdir)
    samples, pool = prepare_data(cfg)
    initial_labeled = list(pool.labeled_ids)
    # consume the identical annotation budget up front, in round-sized chunks
    budget = cfg.budget_per_round
    for round_index in range(1, cfg.al.rounds + 1):
        rng = cfg.stream_rng(STREAM_SELECTION, round_index)
        pool.promote(sampler.random_select(pool.unlabeled_ids, budget, rng))

    models = build_model_pair(cfg, with_teacher=False)
    streams = Streams(train=cfg.stream_rng(STREAM_TRAIN),
                      noise=cfg.stream_rng(STREAM_NOISE))
    val_samples = [samples[i] for i in pool.val_ids]
    test_samples = [samples[i] for i in pool.test_ids]

    metrics_rows: List[str] = []
    loss_rows: List[str] = []
    total_epochs = cfg.al.rounds * cfg.train.epochs_per_round
    state = train_round(models, pool, samples, cfg, cfg.al.rounds, streams,
                        loss_rows, val_samples, epochs=total_epochs,
                        supervised_only=True)
    metrics_rows.append(metrics.metrics_csv_row(
        cfg.al.rounds, "val", len(val_samples),
        state.best_val_dsc, state.best_val_hd))

    best_student = models.student.clone()
    best_student.load_state_arrays(state.best_state)
    test_dsc, test_hd = metrics.evaluate(best_student, test_samples)
    metrics_rows.append(metrics.metrics_csv_row(
        cfg.al.rounds, "test", len(test_samples), test_dsc, test_hd))

    history = {
        "initial_labeled": initial_labeled,
        "rounds": pool.history,
        "final_labeled": pool.labeled_ids,
    }
    _write_outputs(outdir, cfg, metrics_rows, loss_rows, [], history,
                   best_student)
    return {
        "strategy": "supervised",
        "seed": cfg.seeds.master,
        "final_test_dsc": test_dsc,
        "final_test_hd": test_hd,
        "final_labeled": len(pool.labeled_ids),
        "best_val_dsc": state.best_val_dsc,
    }
