from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

METRIC_NAMES = ["hr_1", "hr_5", "hr_10", "ndcg_5", "ndcg_10", "mrr"]


class MetricsReport(BaseModel):
    """
    Ranking metrics over sampled-candidate trials, raw values in [0, 1].
    """
    hr_1: float = Field(ge=0.0, le=1.0)
    hr_5: float = Field(ge=0.0, le=1.0)
    hr_10: float = Field(ge=0.0, le=1.0)
    ndcg_5: float = Field(ge=0.0, le=1.0)
    ndcg_10: float = Field(ge=0.0, le=1.0)
    mrr: float = Field(ge=0.0, le=1.0)
    n_trials: int = Field(ge=0)

    @property
    def ndcg_1(self) -> float:
        # a single relevant item makes NDCG@1 identical to HR@1
        return self.hr_1

    def as_percent(self) -> Dict[str, float]:
        return {name: round(100.0 * getattr(self, name), 2) for name in METRIC_NAMES}


class SrdReport(BaseModel):
    accuracy: float = Field(ge=0.0, le=1.0)
    n_trials: int
    accuracy_unseen: Optional[float] = None
    n_unseen: int = 0


class ProfileReport(BaseModel):
    task: str
    kind: str
    n_users: int
    accuracy: Optional[float] = None
    majority_baseline: Optional[float] = None
    mse: Optional[float] = None
    mse_raw: Optional[float] = None
    variance_baseline: Optional[float] = None


class EvalReport(BaseModel):
    """Machine-readable evaluation output, one JSON object per line."""
    task: str
    metrics: Dict[str, Any]
    n_trials: int
    seed: int
    checkpoint_id: str


class TrainLogRecord(BaseModel):
    stage: str = "pretrain"
    epoch: int
    iter: int
    l_mip: Optional[float] = None
    l_uap: Optional[float] = None
    l_srd: Optional[float] = None
    l_total: float
    wall_ms: float
    # set when every SRD query in the batch had its negatives masked
    srd_dropped: bool = False


class DatasetStatistics(BaseModel):
    users: int
    items: int
    rels: int
    interactions: int
    avg_sequence_length: float

    def table_line(self) -> str:
        return (
            f"#Users {self.users}  #Items {self.items}  #Rels {self.rels}  "
            f"#Interactions {self.interactions}"
        )


class RunManifest(BaseModel):
    command: str
    config_path: Optional[str] = None
    config: Dict[str, Any] = {}
    seed: Optional[int] = None
    seed_auto_chosen: bool = False
    input_hashes: Dict[str, str] = {}
    outputs: List[str] = []
    output_hashes: Dict[str, str] = {}
    ablation: Optional[str] = None
    started_at: str
    finished_at: Optional[str] = None
    status: str = "running"
