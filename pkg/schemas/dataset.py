from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.settings import NUM_SPECIAL_TOKENS


class RawRecord(BaseModel):
    """
    One user-item interaction as read from the input files.
    """
    model_config = ConfigDict(frozen=True)

    user_id: str
    item_id: str
    timestamp: int = Field(ge=0)
    rating: Optional[float] = None


class AttributeSchema(BaseModel):
    """
    Declared user attributes: numeric ones are regressed, discrete ones classified.
    """
    numeric_names: List[str] = []
    discrete_names: List[str] = []
    discrete_cardinalities: List[int] = []

    @model_validator(mode="after")
    def check_names(self) -> "AttributeSchema":
        names = self.numeric_names + self.discrete_names
        if len(set(names)) != len(names):
            raise ValueError(f"Attribute names must be unique, got {names}")
        if len(self.discrete_cardinalities) != len(self.discrete_names):
            raise ValueError("One cardinality is required per discrete attribute")
        if any(c < 2 for c in self.discrete_cardinalities):
            raise ValueError("Discrete attribute cardinalities must be >= 2")
        return self

    @property
    def is_empty(self) -> bool:
        return not self.numeric_names and not self.discrete_names

    def kind_of(self, name: str) -> str:
        if name in self.numeric_names:
            return "numeric"
        if name in self.discrete_names:
            return "discrete"
        raise KeyError(name)


class InteractionDataset(BaseModel):
    """
    Chronological item sequences per user.
    Item index i maps to item_vocab[i - NUM_SPECIAL_TOKENS]; indices below that are special tokens.
    """
    user_vocab: List[str]
    item_vocab: List[str]
    sequences: List[List[int]]
    popularity: List[int]

    @model_validator(mode="after")
    def check_shapes(self) -> "InteractionDataset":
        if len(self.sequences) != len(self.user_vocab):
            raise ValueError("One sequence is required per user")
        if len(self.popularity) != self.vocab_size:
            raise ValueError("Popularity must cover the whole item vocabulary")
        return self

    @property
    def num_users(self) -> int:
        return len(self.user_vocab)

    @property
    def num_items(self) -> int:
        return len(self.item_vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.item_vocab) + NUM_SPECIAL_TOKENS

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def user_index(self) -> dict:
        return {u: i for i, u in enumerate(self.user_vocab)}

    def item_index(self) -> dict:
        return {item: i + NUM_SPECIAL_TOKENS for i, item in enumerate(self.item_vocab)}


class LeaveOneOutSplit(BaseModel):
    """
    Per evaluated user: training prefix, validation target and test target.
    Users whose sequence is shorter than 3 are listed in `excluded`.
    """
    users: List[int]
    prefixes: List[List[int]]
    valid: List[int]
    test: List[int]
    excluded: List[int] = []

    def test_prefix(self, position: int) -> List[int]:
        """Prefix used to score the test target: the training prefix plus the valid item."""
        return self.prefixes[position] + [self.valid[position]]


@dataclass
class AttributeTable:
    """
    Per-user attribute values aligned with the user vocabulary.
    Missing numeric values are NaN, missing discrete values are -1.
    """
    numeric: np.ndarray
    discrete: np.ndarray

    def __post_init__(self):
        self.numeric = np.asarray(self.numeric, dtype=np.float64)
        self.discrete = np.asarray(self.discrete, dtype=np.int64)
        if self.numeric.ndim == 1:
            self.numeric = self.numeric[:, None]
        if self.discrete.ndim == 1:
            self.discrete = self.discrete[:, None]
        if len(self.numeric) != len(self.discrete):
            raise ValueError("Numeric and discrete tables must have one row per user")

    @property
    def num_users(self) -> int:
        return len(self.numeric)

    def validate(self, schema: AttributeSchema) -> None:
        if self.numeric.shape[1] != len(schema.numeric_names) or self.discrete.shape[1] != len(schema.discrete_names):
            raise ValueError(
                f"Attribute table has {self.numeric.shape[1]} numeric / {self.discrete.shape[1]} discrete columns, "
                f"schema declares {len(schema.numeric_names)} / {len(schema.discrete_names)}"
            )
        for j, card in enumerate(schema.discrete_cardinalities):
            column = self.discrete[:, j]
            if np.any(column >= card):
                raise ValueError(f"Discrete attribute '{schema.discrete_names[j]}' has values >= cardinality {card}")

    def subset(self, users) -> "AttributeTable":
        users = np.asarray(users, dtype=np.int64)
        return AttributeTable(self.numeric[users], self.discrete[users])

    @classmethod
    def empty(cls, num_users: int, schema: AttributeSchema) -> "AttributeTable":
        return cls(
            np.full((num_users, len(schema.numeric_names)), np.nan),
            np.full((num_users, len(schema.discrete_names)), -1, dtype=np.int64),
        )
