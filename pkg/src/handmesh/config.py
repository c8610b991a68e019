"""One JSON-serializable config drives a full train/eval/bench run."""

import json
from dataclasses import dataclass, field

from .losses import LossWeights
from .regressor import DecoderConfig, paper_decoder_config
from .tokens import SamplerConfig


@dataclass
class ExperimentConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    decoder: DecoderConfig = field(default_factory=paper_decoder_config)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    total_steps: int = 200
    batch_size: int = 4
    seed: int = 0
    use_pos_emb: bool = True
    dataset: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if self.total_steps < 0:
            raise ValueError(f"step count must be >= 0, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return {
            "sampler": self.sampler.to_dict(),
            "decoder": self.decoder.to_dict(),
            "loss_weights": self.loss_weights.to_dict(),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "use_pos_emb": self.use_pos_emb,
            "dataset": self.dataset,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sampler"] = SamplerConfig.from_dict(d.get("sampler", SamplerConfig().to_dict()))
        d["decoder"] = DecoderConfig.from_dict(d.get("decoder", paper_decoder_config().to_dict()))
        d["loss_weights"] = LossWeights.from_dict(d.get("loss_weights", LossWeights().to_dict()))
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
