import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from schemas.dataset import AttributeSchema, RawRecord
from utils.errors import DataError
from utils.logger import logger

# Compliment totals are bucketed as 0, 1-9, 10-99, 100+ for the discrete compliment task
COMPLIMENT_LEVEL_BOUNDS = [1, 10, 100]

YELP_SCHEMA = AttributeSchema(
    numeric_names=["compliments", "average_stars"],
    discrete_names=["compliment_level"],
    discrete_cardinalities=[len(COMPLIMENT_LEVEL_BOUNDS) + 1],
)


@dataclass
class LoadResult:
    """
    Everything read from one set of input files, still keyed by raw ids.
    """
    records: List[RawRecord]
    edges: List[Tuple[str, str]]
    attributes: Dict[str, Dict[str, Any]]
    schema: AttributeSchema
    skipped: int = 0
    skipped_by_file: Dict[str, int] = field(default_factory=dict)


def _read_json_lines(path: Path) -> Tuple[List[dict], int]:
    """
    Parses a JSON-lines file, skipping lines that are not a JSON object.
    """
    rows, skipped = [], 0
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError:
                    skipped += 1
                    continue
                if not isinstance(row, dict):
                    skipped += 1
                    continue
                rows.append(row)
    except OSError as e:
        logger.error(f"Cannot read {path}: {e}")
        raise DataError(f"Cannot read input file {path}: {e}") from e
    return rows, skipped


def symmetric_edges(pairs) -> List[Tuple[str, str]]:
    """Collapses directed friend pairs into unique undirected edges without self-loops."""
    edges = set()
    for a, b in pairs:
        if a == b:
            continue
        edges.add((a, b) if a < b else (b, a))
    return sorted(edges)


def _parse_friends(value: Any) -> List[str]:
    if value is None:
        return []
    if isinstance(value, list):
        friends = [str(f).strip() for f in value]
    else:
        friends = [f.strip() for f in str(value).split(",")]
    return [f for f in friends if f and f != "None"]


def compliment_level(total: float) -> int:
    return int(np.searchsorted(COMPLIMENT_LEVEL_BOUNDS, total, side="right"))


def _user_attributes(row: Dict[str, Any]) -> Dict[str, Any]:
    """Compliment total, its level and average stars of one user line; raises on non-numeric values."""
    values: Dict[str, Any] = {}
    compliment_keys = [k for k in row if k.startswith("compliment_")]
    if compliment_keys:
        total = float(sum(float(row[k] or 0) for k in compliment_keys))
        values["compliments"] = total
        values["compliment_level"] = compliment_level(total)
    if row.get("average_stars") is not None:
        values["average_stars"] = float(row["average_stars"])
    return values


def load_yelp(review_path: Path, user_path: Path) -> LoadResult:
    """
    Reads the YELP academic dump (review.json and user.json, one JSON object per line).
    Malformed lines are skipped and counted; an unreadable file is fatal.
    """
    review_path, user_path = Path(review_path), Path(user_path)
    logger.info(f"Loading YELP reviews from: {review_path}")
    rows, skipped_reviews = _read_json_lines(review_path)

    frame = pd.DataFrame(rows, columns=["user_id", "business_id", "stars", "date"])
    dates = pd.to_datetime(frame["date"], errors="coerce", utc=True)
    valid = frame["user_id"].notna() & frame["business_id"].notna() & dates.notna()
    skipped_reviews += int((~valid).sum())

    records = []
    timestamps = (dates[valid].astype("int64") // 1_000_000_000).tolist()
    for (user_id, item_id, stars), ts in zip(frame.loc[valid, ["user_id", "business_id", "stars"]].itertuples(index=False), timestamps):
        try:
            rating = None if pd.isna(stars) else float(stars)
            records.append(RawRecord(user_id=str(user_id), item_id=str(item_id), timestamp=int(ts), rating=rating))
        except (ValidationError, TypeError, ValueError):
            skipped_reviews += 1

    logger.info(f"Loading YELP users from: {user_path}")
    users, skipped_users = _read_json_lines(user_path)
    pairs, attributes = [], {}
    for row in users:
        user_id = row.get("user_id")
        if not user_id:
            skipped_users += 1
            continue
        user_id = str(user_id)
        try:
            values = _user_attributes(row)
        except (TypeError, ValueError):
            skipped_users += 1
            continue
        pairs.extend((user_id, friend) for friend in _parse_friends(row.get("friends")))
        attributes[user_id] = values

    edges = symmetric_edges(pairs)
    skipped = skipped_reviews + skipped_users
    if skipped:
        logger.warning(f"Skipped {skipped_reviews} malformed review lines and {skipped_users} malformed user lines")
    logger.info(f"YELP load: {len(records)} records, {len(edges)} edges, {len(attributes)} users with attributes")
    return LoadResult(
        records=records,
        edges=edges,
        attributes=attributes,
        schema=YELP_SCHEMA,
        skipped=skipped,
        skipped_by_file={str(review_path): skipped_reviews, str(user_path): skipped_users},
    )


def _read_tsv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.error(f"Cannot read {path}: {e}")
        raise DataError(f"Cannot read input file {path}: {e}") from e


def load_tsv(
    interactions_path: Path,
    edges_path: Optional[Path] = None,
    attributes_path: Optional[Path] = None,
) -> LoadResult:
    """
    Generic ingestion. Every file carries a header row:
      interactions: user, item, timestamp (optional rating)
      edges:        two user columns
      attributes:   user, then one column per attribute named `n:<name>` (numeric) or `d:<name>` (discrete)
    """
    interactions = _read_tsv(Path(interactions_path))
    missing = {"user", "item", "timestamp"} - set(interactions.columns)
    if missing:
        raise DataError(f"{interactions_path} is missing columns: {sorted(missing)}")

    records, skipped = [], 0
    has_rating = "rating" in interactions.columns
    for row in interactions.itertuples(index=False):
        try:
            rating = float(row.rating) if has_rating and row.rating != "" else None
            records.append(RawRecord(user_id=row.user, item_id=row.item, timestamp=int(row.timestamp), rating=rating))
        except (ValidationError, ValueError):
            skipped += 1

    edges: List[Tuple[str, str]] = []
    if edges_path is not None:
        frame = _read_tsv(Path(edges_path))
        if frame.shape[1] < 2:
            raise DataError(f"{edges_path} needs two user columns")
        edges = symmetric_edges(zip(frame.iloc[:, 0], frame.iloc[:, 1]))

    schema = AttributeSchema()
    attributes: Dict[str, Dict[str, Any]] = {}
    if attributes_path is not None:
        schema, attributes = _load_attribute_tsv(Path(attributes_path))

    if skipped:
        logger.warning(f"Skipped {skipped} malformed interaction rows in {interactions_path}")
    logger.info(f"TSV load: {len(records)} records, {len(edges)} edges, {len(attributes)} users with attributes")
    return LoadResult(records=records, edges=edges, attributes=attributes, schema=schema, skipped=skipped,
                      skipped_by_file={str(interactions_path): skipped})


def _load_attribute_tsv(path: Path) -> Tuple[AttributeSchema, Dict[str, Dict[str, Any]]]:
    frame = _read_tsv(path)
    user_column = frame.columns[0]
    numeric, discrete = [], []
    for column in frame.columns[1:]:
        if column.startswith("n:"):
            numeric.append(column)
        elif column.startswith("d:"):
            discrete.append(column)
        else:
            raise DataError(f"Attribute column '{column}' in {path} must start with 'n:' or 'd:'")

    # Discrete categories are indexed in sorted order so the mapping is reproducible
    categories = {c: sorted(v for v in frame[c].unique() if v != "") for c in discrete}
    schema = AttributeSchema(
        numeric_names=[c[2:] for c in numeric],
        discrete_names=[c[2:] for c in discrete],
        discrete_cardinalities=[max(2, len(categories[c])) for c in discrete],
    )

    attributes: Dict[str, Dict[str, Any]] = {}
    for _, row in frame.iterrows():
        values: Dict[str, Any] = {}
        for c in numeric:
            try:
                if row[c] != "":
                    values[c[2:]] = float(row[c])
            except ValueError:
                logger.warning(f"Ignoring non-numeric value '{row[c]}' for {c} of user {row[user_column]}")
        for c in discrete:
            if row[c] != "":
                values[c[2:]] = categories[c].index(row[c])
        attributes[str(row[user_column])] = values
    return schema, attributes
