"""Estimator-style training interfaces for the backbone and the regularizer.

Both classes follow scikit-learn conventions: hyperparameters are stored
verbatim by __init__, fitted state lives in trailing-underscore attributes,
and get_params/set_params make them cloneable and grid-searchable. fit takes
a DatasetSplit instead of an (X, y) matrix pair because instances are
structured (scene, question) records.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import autodiff as ad
from .attreg import RegConfig, finetune_with_attreg
from .autodiff import Adam
from .data import QUESTION_VOCAB, DatasetSplit
from .metrics import score_predictions
from .model import Batch, ModelConfig, VqaModel


class EstimatorParamsMixin:
    """get_params/set_params over the keyword arguments of __init__."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [name for name, p in sig.parameters.items()
                if name != "self" and p.kind != p.VAR_KEYWORD]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


class UpDnClassifier(EstimatorParamsMixin):
    """Attention-based VQA classifier trained with the plain multi-label loss.

    With ``val_split`` given, fit keeps the parameters from the epoch with the
    best in-domain validation accuracy (ties go to the earlier epoch). With
    ``rand_img=True`` every batch is augmented with a copy of each question
    paired with the features of a uniformly chosen different scene and an
    all-zero target.
    """

    def __init__(self, d_w: int = 16, d_q: int = 32, d_h: int = 32,
                 lr: float = 1e-3, epochs: int = 12, batch_size: int = 64,
                 uniform_attention: bool = False, rand_img: bool = False,
                 seed: int = 0):
        self.d_w = d_w
        self.d_q = d_q
        self.d_h = d_h
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.uniform_attention = uniform_attention
        self.rand_img = rand_img
        self.seed = seed

    def build_config(self, split: DatasetSplit) -> ModelConfig:
        return ModelConfig(
            question_vocab=QUESTION_VOCAB, answer_vocab=tuple(split.answer_vocab),
            d_v=split.d_v, d_w=self.d_w, d_q=self.d_q, d_h=self.d_h,
            uniform_attention=self.uniform_attention,
        )

    def fit(self, train_split: DatasetSplit, val_split: DatasetSplit | None = None):
        model = VqaModel(self.build_config(train_split), seed=self.seed)
        full = model.encode_batch(train_split.instances)
        optimizer = Adam(model.params, self.lr)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        n = len(train_split.instances)
        history: list[dict] = []
        best: tuple[float, int, dict] | None = None
        pairings: list[tuple[str, str]] = []

        for epoch in range(self.epochs):
            order = rng.permutation(n)
            losses = []
            for lo in range(0, n, self.batch_size):
                idx = order[lo : lo + self.batch_size]
                batch = full.subset(idx)
                targets = batch.targets
                features = batch.features
                active = batch.active
                token_ids, token_mask = batch.token_ids, batch.token_mask
                if self.rand_img:
                    donors = np.array([self._donor(rng, n, i) for i in idx])
                    features = np.concatenate([features, full.features[donors]])
                    active = np.concatenate([active, full.active[donors]])
                    token_ids = np.concatenate([token_ids, batch.token_ids])
                    token_mask = np.concatenate([token_mask, batch.token_mask])
                    targets = np.concatenate([targets, np.zeros_like(batch.targets)])
                    if epoch == 0:
                        pairings.extend(
                            (train_split.instances[i][1].qid,
                             train_split.instances[d][0].scene_id)
                            for i, d in zip(idx, donors)
                        )
                step = Batch(token_ids, token_mask, features, active, targets)
                with ad.Tape():
                    fwd = model.forward(step)
                    loss = model.batch_loss(fwd, targets)
                    ad.backward(loss)
                if not np.isfinite(loss.values):
                    raise FloatingPointError(
                        f"training diverged at epoch {epoch}: loss={float(loss.values)}")
                optimizer.step()
                optimizer.zero_grad()
                losses.append(float(loss.values))
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val": None}
            if val_split is not None:
                record = score_predictions(val_split, model.predict_answers(val_split))
                row["val"] = record
                if best is None or record.overall > best[0]:
                    best = (record.overall, epoch, model.snapshot())
            history.append(row)

        if best is not None:
            model.restore(best[2])
            self.best_epoch_ = best[1]
        self.model_ = model
        self.history_ = history
        self.rand_img_pairings_ = pairings
        return self

    @staticmethod
    def _donor(rng: np.random.Generator, n: int, own: int) -> int:
        donor = int(rng.integers(n - 1))
        return donor + 1 if donor >= own else donor

    def predict(self, split_or_pairs) -> list[str]:
        return self.model_.predict_answers(split_or_pairs)

    def predict_scores(self, split_or_pairs) -> np.ndarray:
        return self.model_.predict_probs(split_or_pairs)

    def score(self, split: DatasetSplit) -> float:
        return score_predictions(split, self.predict(split)).overall


class AttRegFineTuner(EstimatorParamsMixin):
    """Fine-tunes a fitted UpDnClassifier (or VqaModel) with the curated loss.

    The base model is copied, never mutated. An unfitted classifier is
    initialized fresh, which gives the end-to-end training mode when combined
    with start_epoch=0 and a full epoch budget.
    """

    def __init__(self, estimator=None, sigma: float = 0.6, top_m: int = 3,
                 ignored_pct: float = 40.0, lam: float = 1.0, start_epoch: int = 0,
                 epochs: int = 8, lr: float = 1e-4, batch_size: int = 64,
                 mode: str = "attreg", recompute_attention: bool = True,
                 seed: int = 0):
        self.estimator = estimator
        self.sigma = sigma
        self.top_m = top_m
        self.ignored_pct = ignored_pct
        self.lam = lam
        self.start_epoch = start_epoch
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.mode = mode
        self.recompute_attention = recompute_attention
        self.seed = seed

    def reg_config(self) -> RegConfig:
        return RegConfig(sigma=self.sigma, top_m=self.top_m, ignored_pct=self.ignored_pct,
                         lam=self.lam, start_epoch=self.start_epoch,
                         recompute_attention=self.recompute_attention)

    def _base_model(self, train_split: DatasetSplit) -> VqaModel:
        est = self.estimator
        if isinstance(est, VqaModel):
            return est.clone()
        if isinstance(est, UpDnClassifier):
            if hasattr(est, "model_"):
                return est.model_.clone()
            return VqaModel(est.build_config(train_split), seed=est.seed)
        raise TypeError("estimator must be a VqaModel or UpDnClassifier")

    def fit(self, train_split: DatasetSplit):
        model = self._base_model(train_split)
        self.epoch_stats_ = finetune_with_attreg(
            model, train_split, self.reg_config(),
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            seed=self.seed, mode=self.mode,
        )
        self.model_ = model
        return self

    def predict(self, split_or_pairs) -> list[str]:
        return self.model_.predict_answers(split_or_pairs)

    def score(self, split: DatasetSplit) -> float:
        return score_predictions(split, self.predict(split)).overall
