"""Bottom-up/top-down VQA backbone: GRU question encoder, top-down attention
over object features, attention pooling, and a multi-label answer classifier.

The forward pass is built entirely from autodiff ops, so one tape covers the
whole training step. Evaluation paths run the same code without a tape.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSplit, QAInstance, Scene, soft_targets

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    question_vocab: tuple[str, ...]
    answer_vocab: tuple[str, ...]
    d_v: int
    d_w: int = 16
    d_q: int = 32
    d_h: int = 32
    max_question_len: int = 14
    uniform_attention: bool = False


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))

    def mat(n_in: int, n_out: int) -> Tensor:
        std = 1.0 / np.sqrt(n_in)
        return Tensor(rng.normal(scale=std, size=(n_in, n_out)), requires_grad=True)

    def vec(n: int) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    c = config
    params = {"word_emb": Tensor(rng.normal(scale=0.5, size=(len(c.question_vocab), c.d_w)),
                                 requires_grad=True)}
    for gate in ("z", "r", "n"):
        params[f"gru.w_{gate}"] = mat(c.d_w, c.d_q)
        params[f"gru.u_{gate}"] = mat(c.d_q, c.d_q)
        params[f"gru.b_{gate}"] = vec(c.d_q)
    params["attn.w"] = mat(c.d_v + c.d_q, c.d_h)
    params["attn.b"] = vec(c.d_h)
    params["attn.v"] = mat(c.d_h, 1)
    params["fuse_q.w"] = mat(c.d_q, c.d_h)
    params["fuse_q.b"] = vec(c.d_h)
    params["fuse_v.w"] = mat(c.d_v, c.d_h)
    params["fuse_v.b"] = vec(c.d_h)
    params["clf.w1"] = mat(c.d_h, c.d_h)
    params["clf.b1"] = vec(c.d_h)
    params["clf.w2"] = mat(c.d_h, len(c.answer_vocab))
    params["clf.b2"] = vec(len(c.answer_vocab))
    return params


@dataclass
class Batch:
    """Arrays for a batch of (scene, question) pairs, padded to max length."""
    token_ids: np.ndarray          # (B, L) int64
    token_mask: np.ndarray         # (B, L) 1.0 where a real token sits
    features: np.ndarray           # (B, K, d_v)
    active: np.ndarray             # (B, K) bool
    targets: np.ndarray | None     # (B, |A|) soft targets

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(
            self.token_ids[idx], self.token_mask[idx], self.features[idx],
            self.active[idx], None if self.targets is None else self.targets[idx],
        )


@dataclass
class ForwardPass:
    """Tape-aware tensors for one batch forward."""
    q: Tensor        # (B, d_q)
    scores: Tensor   # (B, K)
    alpha: Tensor    # (B, K)
    fused: Tensor    # (B, d_v)
    logits: Tensor   # (B, |A|)
    features: Tensor


@dataclass
class ModelOutput:
    """Per-instance forward results as plain arrays."""
    q: np.ndarray
    scores: np.ndarray
    alpha: np.ndarray
    fused: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


class VqaModel:
    """Holds the configuration and named parameter tensors of one backbone."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self._tok2id = {t: i for i, t in enumerate(config.question_vocab)}

    # -- construction helpers ------------------------------------------------

    def clone(self) -> "VqaModel":
        params = {k: Tensor(p.values.copy(), requires_grad=True)
                  for k, p in self.params.items()}
        return VqaModel(self.config, params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.values = snapshot[k].copy()

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].values.tobytes())
        return h.hexdigest()

    # -- batch preparation ---------------------------------------------------

    def token_ids(self, tokens: list[str]) -> list[int]:
        ids = []
        for tok in tokens[: self.config.max_question_len]:
            if tok not in self._tok2id:
                raise ValueError(f"question token {tok!r} not in model vocabulary")
            ids.append(self._tok2id[tok])
        return ids

    def encode_batch(self, pairs: list[tuple[Scene, QAInstance]],
                     with_targets: bool = True) -> Batch:
        ids = [self.token_ids(qa.question_tokens) for _, qa in pairs]
        max_len = max(1, max((len(x) for x in ids), default=1))
        token_ids = np.zeros((len(pairs), max_len), dtype=np.int64)
        token_mask = np.zeros((len(pairs), max_len))
        for i, row in enumerate(ids):
            token_ids[i, : len(row)] = row
            token_mask[i, : len(row)] = 1.0
        features = np.stack([
            np.stack([d.feature for d in scene.detections]) for scene, _ in pairs
        ])
        active = np.array([[d.active for d in scene.detections] for scene, _ in pairs])
        targets = None
        if with_targets:
            targets = np.stack([
                soft_targets(qa.answers, self.config.answer_vocab) for _, qa in pairs
            ])
        return Batch(token_ids, token_mask, features, active, targets)

    # -- forward pieces ------------------------------------------------------

    def encode_question(self, token_ids: np.ndarray, token_mask: np.ndarray) -> Tensor:
        """Final GRU hidden state over the non-pad tokens; zero state if empty."""
        p = self.params
        B, L = token_ids.shape
        h = Tensor(np.zeros((B, self.config.d_q)))
        for t in range(L):
            x = ad.gather(p["word_emb"], token_ids[:, t])
            z = ad.sigmoid(ad.matmul(x, p["gru.w_z"]) + ad.matmul(h, p["gru.u_z"]) + p["gru.b_z"])
            r = ad.sigmoid(ad.matmul(x, p["gru.w_r"]) + ad.matmul(h, p["gru.u_r"]) + p["gru.b_r"])
            n = ad.tanh(ad.matmul(x, p["gru.w_n"]) + r * ad.matmul(h, p["gru.u_n"]) + p["gru.b_n"])
            h_new = n + z * (h - n)
            mask_t = Tensor(token_mask[:, t : t + 1])
            h = h + mask_t * (h_new - h)
        return h

    def attend(self, features: Tensor, active: np.ndarray, q: Tensor) -> tuple[Tensor, Tensor]:
        """Question-conditioned scores and masked-softmax weights per detection."""
        if not active.any(axis=1).all():
            raise ValueError("attend: every scene needs at least one active detection")
        B, K, d_v = features.shape
        if self.config.uniform_attention:
            weights = active / active.sum(axis=1, keepdims=True)
            return Tensor(np.zeros((B, K))), Tensor(weights)
        p = self.params
        flat = ad.reshape(features, (B * K, d_v))
        joint = ad.concat([flat, ad.repeat_rows(q, K)], axis=1)
        hidden = ad.tanh(ad.matmul(joint, p["attn.w"]) + p["attn.b"])
        scores = ad.reshape(ad.matmul(hidden, p["attn.v"]), (B, K))
        alpha = ad.masked_softmax(scores, active)
        return scores, alpha

    def fuse(self, features: Tensor, alpha: Tensor) -> Tensor:
        return ad.weighted_sum(features, alpha)

    def predict(self, fused: Tensor, q: Tensor) -> Tensor:
        p = self.params
        jv = ad.tanh(ad.matmul(fused, p["fuse_v.w"]) + p["fuse_v.b"])
        jq = ad.tanh(ad.matmul(q, p["fuse_q.w"]) + p["fuse_q.b"])
        hidden = ad.relu(ad.matmul(jv * jq, p["clf.w1"]) + p["clf.b1"])
        return ad.matmul(hidden, p["clf.w2"]) + p["clf.b2"]

    def forward(self, batch: Batch, features: Tensor | None = None,
                active: np.ndarray | None = None) -> ForwardPass:
        feats = features if features is not None else Tensor(batch.features)
        act = active if active is not None else batch.active
        q = self.encode_question(batch.token_ids, batch.token_mask)
        scores, alpha = self.attend(feats, act, q)
        fused = self.fuse(feats, alpha)
        logits = self.predict(fused, q)
        return ForwardPass(q, scores, alpha, fused, logits, feats)

    def batch_loss(self, fwd: ForwardPass, targets: np.ndarray) -> Tensor:
        """Mean over instances of the per-instance answer-summed BCE."""
        elem = ad.bce_with_logits(fwd.logits, Tensor(targets))
        return ad.scale(ad.tsum(elem), 1.0 / targets.shape[0])

    # -- single-instance conveniences ----------------------------------------

    def run_instance(self, scene: Scene, qa: QAInstance) -> ModelOutput:
        batch = self.encode_batch([(scene, qa)], with_targets=False)
        fwd = self.forward(batch)
        logits = fwd.logits.values[0]
        return ModelOutput(
            q=fwd.q.values[0], scores=fwd.scores.values[0], alpha=fwd.alpha.values[0],
            fused=fwd.fused.values[0], logits=logits, probs=_sigmoid(logits),
        )

    def vqa_forward_loss(self, scene: Scene, qa: QAInstance) -> tuple[ModelOutput, float]:
        out = self.run_instance(scene, qa)
        y = soft_targets(qa.answers, self.config.answer_vocab)
        x = out.logits
        loss = float(np.sum(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))
        return out, loss

    # -- batched inference ---------------------------------------------------

    def predict_probs(self, split_or_pairs, batch_size: int = 256) -> np.ndarray:
        pairs = split_or_pairs.instances if isinstance(split_or_pairs, DatasetSplit) \
            else list(split_or_pairs)
        chunks = []
        for lo in range(0, len(pairs), batch_size):
            batch = self.encode_batch(pairs[lo : lo + batch_size], with_targets=False)
            fwd = self.forward(batch)
            chunks.append(_sigmoid(fwd.logits.values))
        return np.concatenate(chunks) if chunks else np.zeros((0, len(self.config.answer_vocab)))

    def predict_answers(self, split_or_pairs, batch_size: int = 256) -> list[str]:
        probs = self.predict_probs(split_or_pairs, batch_size)
        return [self.config.answer_vocab[j] for j in probs.argmax(axis=1)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return ad.sigmoid_array(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: VqaModel, path: str | Path) -> None:
    blob = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "params": {
            name: {"shape": list(p.values.shape), "values": p.values.ravel().tolist()}
            for name, p in model.params.items()
        },
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> VqaModel:
    blob = json.loads(Path(path).read_text())
    if blob.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    cfg_dict = blob["config"]
    cfg_dict["question_vocab"] = tuple(cfg_dict["question_vocab"])
    cfg_dict["answer_vocab"] = tuple(cfg_dict["answer_vocab"])
    config = ModelConfig(**cfg_dict)
    if config_hash(config) != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    params = {}
    for name, rec in blob["params"].items():
        values = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        params[name] = Tensor(values, requires_grad=True)
    return VqaModel(config, params)
