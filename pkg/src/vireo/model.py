"""End-to-end pipeline: refinement stack, coarse prior, and embedding head.

The model owns every trainable tensor; provider features and text
embeddings pass through as frozen inputs. The coarse-prior module can be
detached at construction, which removes its parameters, its query priors,
and its auxiliary loss in one switch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, cross_entropy, first_nonfinite, scale
from .coarse_prior import CoarsePrior, CoarsePriorModule, coarse_loss
from .errors import ConfigError
from .evaluation import IGNORE_ID
from .head import EmbeddingHead, HeadConfig, SegPrediction
from .prompts import PromptState, run_encoder_stack, select_layers
from .providers import FeatureStack, TextBank
from .vfea import load_feature_file, save_feature_file


class CheckpointError(ConfigError):
    """Checkpoint incompatible with this build or configuration."""


@dataclass
class ModelConfig:
    layers: int = 6
    d: int = 16
    d_depth: int = 8
    n_prompts: int = 16
    decoder_layers: int = 3
    temperature: float | None = None
    prompt_chain: str = "residual"
    use_coarse_prior: bool = True

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("need at least one encoder layer")
        if self.n_prompts < 1:
            raise ConfigError("need at least one prompt")
        if self.d % 4 != 0:
            raise ConfigError(f"embedding width must be divisible by 4, got {self.d}")


@dataclass
class ForwardOutput:
    refined: dict[int, Tensor]
    prediction: SegPrediction
    prior: CoarsePrior | None
    final_loss: Tensor | None = None
    aux_loss: Tensor | None = None
    total_loss: Tensor | None = None


class VireoModel:
    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.selected = select_layers(config.layers)
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
        self.prompt_state = PromptState(self.selected, config.n_prompts, config.d,
                                        config.d_depth, seed=streams[0],
                                        chain=config.prompt_chain)
        # query count matches prompt count so priors add one-to-one
        self.coarse = (CoarsePriorModule(streams[1], config.d, config.n_prompts,
                                         num_scales=len(self.selected))
                       if config.use_coarse_prior else None)
        head_cfg = HeadConfig(decoder_layers=config.decoder_layers, d=config.d,
                              temperature=config.temperature,
                              num_scales=len(self.selected))
        self.head = EmbeddingHead(streams[2], head_cfg)

    # -- forward -------------------------------------------------------------

    def forward(self, stack: FeatureStack, text: TextBank,
                labels: np.ndarray | None = None,
                coarse_weight: float = 0.4,
                prior_text: TextBank | None = None) -> ForwardOutput:
        """Full pipeline pass. ``prior_text`` pins the coarse-prior vocabulary
        independently of the classification bank (defaults to ``text``)."""
        refined, final_prompt = run_encoder_stack(stack, self.prompt_state, text)
        shallow_to_deep = [refined[i] for i in self.selected]

        prior = None
        queries = final_prompt
        if self.coarse is not None:
            prior = self.coarse.compute(shallow_to_deep, prior_text or text)
            queries = add(queries, prior.query_priors)

        deep_to_shallow = list(reversed(shallow_to_deep))
        prediction = self.head.forward(deep_to_shallow, queries, text)

        out = ForwardOutput(refined=refined, prediction=prediction, prior=prior)
        if labels is not None:
            logits = prediction.logits
            if logits.shape[:2] != labels.shape:
                raise ConfigError(f"labels {labels.shape} do not match logits "
                                  f"{logits.shape[:2]}")
            out.final_loss = cross_entropy(logits, labels, ignore_id=IGNORE_ID,
                                           class_axis=2)
            total = out.final_loss
            if prior is not None:
                if prior.coarse_map.shape[1:] != labels.shape:
                    raise ConfigError("coarse map extents do not match the labels")
                out.aux_loss = coarse_loss(prior.coarse_map, labels, ignore_id=IGNORE_ID)
                total = add(total, scale(out.aux_loss, coarse_weight))
            out.total_loss = total
        return out

    def predict(self, stack: FeatureStack, text: TextBank) -> SegPrediction:
        return self.forward(stack, text).prediction

    # -- parameters ------------------------------------------------------------

    def named_parameters(self):
        yield from self.prompt_state.named_parameters()
        if self.coarse is not None:
            yield from self.coarse.named_parameters("coarse")
        yield from self.head.named_parameters("head")

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def diagnose_nonfinite(self, loss: Tensor) -> str | None:
        return first_nonfinite(loss)

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, prefix) -> Path:
        """Write <prefix>.vfea (parameters) and <prefix>.json (configuration)."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        named = [(name, p.data) for name, p in self.named_parameters()]
        save_feature_file(prefix.with_suffix(".vfea"), named)
        meta = {"config": asdict(self.config), "seed": self.seed}
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return prefix.with_suffix(".vfea")

    @classmethod
    def load_checkpoint(cls, prefix) -> "VireoModel":
        prefix = Path(prefix)
        meta_path = prefix.with_suffix(".json")
        if not meta_path.exists():
            raise CheckpointError(f"missing checkpoint metadata {meta_path}")
        meta = json.loads(meta_path.read_text())
        config = ModelConfig(**meta["config"])
        model = cls(config, seed=meta.get("seed", 0))
        loaded = dict(load_feature_file(prefix.with_suffix(".vfea")))
        for name, param in model.named_parameters():
            if name not in loaded:
                raise CheckpointError(f"checkpoint misses parameter {name}")
            arr = loaded.pop(name)
            if tuple(arr.shape) != param.shape:
                raise CheckpointError(
                    f"incompatible checkpoint version: parameter {name} has shape "
                    f"{tuple(arr.shape)}, this build expects {param.shape}")
            param.data = arr.astype(param.data.dtype)
        if loaded:
            raise CheckpointError(f"checkpoint has unknown parameters {sorted(loaded)}")
        return model
