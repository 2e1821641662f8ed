"""
Delimited-text table manager - reads and writes masked datasets
"""
import logging
import os
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from envelope_em.errors import DataFileNotFound, EmptyTable, MissingColumn, NonNumericCell
from envelope_em.utils.validators import missing_token_variants
from .dataset_model import ObservedDataset

logger = logging.getLogger(__name__)

NA_TOKEN = "NA"


class TableManager:
    """Manages dataset files: comma- or tab-delimited text with a header row"""

    def __init__(self, path: str):
        """Initialize table manager"""
        self.path = path
        self.separator: Optional[str] = None

    def _detect_separator(self) -> str:
        with open(self.path, "r", encoding="utf-8") as handle:
            header = handle.readline()
        separator = "\t" if header.count("\t") > header.count(",") else ","
        logger.debug(f"Detected separator {separator!r} in {self.path}")
        return separator

    def read_frame(self) -> pd.DataFrame:
        """Read the table with only our missing tokens mapped to NaN"""
        if not os.path.isfile(self.path):
            raise DataFileNotFound(f"data file not found: {self.path}")
        self.separator = self._detect_separator()
        try:
            frame = pd.read_csv(self.path, sep=self.separator, dtype=str, na_values=missing_token_variants(),
                                keep_default_na=False, skipinitialspace=True)
        except pd.errors.EmptyDataError:
            raise EmptyTable(f"data file is empty: {self.path}")
        frame.columns = [str(column).strip() for column in frame.columns]
        logger.info(f"Loaded {len(frame)} rows x {len(frame.columns)} columns from {self.path}")
        return frame

    @staticmethod
    def _numeric(frame: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.zeros((len(frame), 0))
        block = frame[list(names)].apply(lambda column: column.str.strip())
        block = block.mask(block.isin(missing_token_variants()))
        try:
            values = block.apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
        except ValueError as error:
            raise NonNumericCell(f"cannot parse a cell as a number: {error}")
        bad = np.argwhere(np.isinf(values))
        if bad.size:
            row, col = bad[0]
            raise NonNumericCell(f"row {row + 1}, column {names[col]!r}: non-finite value")
        return values

    def load(self, predictor_cols: Sequence[str], response_cols: Sequence[str]) -> ObservedDataset:
        """
        Load a masked dataset

        Returns:
            ObservedDataset with columns in the order given
        """
        frame = self.read_frame()
        wanted = list(predictor_cols) + list(response_cols)
        missing = [name for name in wanted if name not in frame.columns]
        if missing:
            raise MissingColumn(f"column(s) not found in {self.path}: {', '.join(missing)}")
        x = self._numeric(frame, list(predictor_cols))
        y = self._numeric(frame, list(response_cols))
        return ObservedDataset.from_arrays(
            x, y, predictor_names=predictor_cols, response_names=response_cols)

    def save(self, ds: ObservedDataset, separator: str = ","):
        """Write the dataset; missing cells as NA, values with 17 significant digits"""
        names = list(ds.predictor_names) + list(ds.response_names)
        frame = pd.DataFrame(np.where(ds.joint_observed, ds.joint, np.nan), columns=names)
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(self.path, sep=separator, na_rep=NA_TOKEN, float_format="%.17g", index=False,
                     lineterminator="\n", encoding="utf-8")
        logger.info(f"Wrote {ds.n} rows to {self.path}")


def load_table(path: str, predictor_cols: Sequence[str], response_cols: Sequence[str]) -> ObservedDataset:
    return TableManager(path).load(predictor_cols, response_cols)


def save_table(ds: ObservedDataset, path: str, separator: str = ","):
    TableManager(path).save(ds, separator=separator)
