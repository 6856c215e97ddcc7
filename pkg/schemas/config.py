from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class EncoderConfig(BaseModel):
    """
    Structural hyperparameters of the bidirectional sequence encoder.
    max_len counts wrapped positions, CLS and SEP included.
    """
    num_layers: int = Field(2, ge=0)
    num_heads: int = Field(2, ge=1)
    hidden_dim: int = Field(64, ge=1)
    max_len: int = Field(32, ge=3)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    vocab_size: int = Field(5, ge=5)
    embedding_dropout: bool = True
    gelu_approximate: Literal["none", "tanh"] = "none"
    tie_output: bool = True

    @model_validator(mode="after")
    def check_heads(self) -> "EncoderConfig":
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        return self


class PretrainConfig(BaseModel):
    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(0.3, ge=0.0)
    lambda3: float = Field(0.5, ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(768, ge=1)
    srd_batch_size: Optional[int] = Field(None, ge=2)
    iterations_per_epoch: int = Field(1500, ge=1)
    num_epochs: int = Field(75, ge=0)
    checkpoint_every: int = Field(5, ge=1)
    mask_proportion: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = 0
    srd_unmasked: bool = False
    profile_similarity_threshold: float = Field(0.05, ge=0.0)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    prefetch: int = Field(2, ge=0)
    double_precision: bool = False
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)

    @property
    def enable_uap(self) -> bool:
        return self.lambda2 > 0

    @property
    def enable_srd(self) -> bool:
        return self.lambda3 > 0

    @property
    def ablation(self) -> str:
        """Name of the configuration in the ablation table."""
        if not self.enable_uap and not self.enable_srd:
            return "w/o All"
        if not self.enable_srd:
            return "w/o Rel"
        if not self.enable_uap:
            return "w/o Pro"
        return "full"


class FinetuneConfig(BaseModel):
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(256, ge=1)
    num_epochs: int = Field(40, ge=0)
    seed: int = 0
    n_neg: int = Field(99, ge=1)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    random_cut: bool = True


class ProfileConfig(BaseModel):
    task: str
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(256, ge=1)
    num_epochs: int = Field(10, ge=0)
    seed: int = 0
    grad_clip: Optional[float] = Field(None, gt=0.0)


class SynthConfig(BaseModel):
    n_users: int = Field(2000, ge=2)
    n_items: int = Field(500, ge=2)
    n_clusters: int = Field(10, ge=1)
    seq_len_range: Tuple[int, int] = (5, 20)
    intra_cluster_item_prob: float = Field(0.8, ge=0.0, le=1.0)
    friend_intra_prob: float = Field(0.9, ge=0.0, le=1.0)
    friends_per_user: int = Field(4, ge=0)
    attribute_noise: float = Field(0.1, ge=0.0, le=1.0)
    transition_concentration: float = Field(0.3, gt=0.0)
    # minimum interactions per user and per item; 1 disables the filter
    kcore: int = Field(5, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_shapes(self) -> "SynthConfig":
        if self.n_items % self.n_clusters != 0:
            raise ValueError(f"n_items {self.n_items} is not divisible by n_clusters {self.n_clusters}")
        low, high = self.seq_len_range
        if low < 1 or high < low:
            raise ValueError(f"Invalid seq_len_range {self.seq_len_range}")
        return self


class PreprocessConfig(BaseModel):
    format: Literal["yelp", "tsv"] = "yelp"
    k: int = Field(5, ge=1)
    cutoff: Optional[int] = Field(None, ge=0)
    holdout_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seed: int = 0


class SweepConfig(BaseModel):
    batch_sizes: List[int] = [64, 128, 256]
    hidden_dims: List[int] = [32, 64]
    n_neg: int = Field(99, ge=1)
