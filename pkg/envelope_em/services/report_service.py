"""
Report service - versioned JSON documents and delimited tables for every command
"""
import json
import logging
import math
import sys
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from envelope_em.data.fit_model import EnvelopeFit
from .inference_service import AsymptoticResult, BootstrapResult
from .selection_service import SelectionReport
from .simulation_service import ScenarioResult

logger = logging.getLogger(__name__)

SCHEMA = "envelope-em/report/v1"


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def build_document(command: str, body: Dict[str, Any], seed: Optional[int] = None,
                   config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    document = {"schema": SCHEMA, "command": command}
    if seed is not None:
        document["seed"] = int(seed)
    if config is not None:
        document["config"] = config
    document.update(body)
    return _clean(document)


def to_json(document: Dict[str, Any]) -> str:
    return json.dumps(document, indent=2, sort_keys=False, allow_nan=False) + "\n"


def fit_document(fit: EnvelopeFit, selection: Optional[SelectionReport] = None,
                 bootstrap: Optional[BootstrapResult] = None, data: Optional[dict] = None,
                 seed: Optional[int] = None, config: Optional[dict] = None,
                 asymptotic: Optional[AsymptoticResult] = None) -> Dict[str, Any]:
    body = {"data": data or {}, "fit": fit.to_dict()}
    if selection is not None:
        body["selection"] = selection.to_dict()
    if bootstrap is not None:
        body["bootstrap"] = bootstrap.to_dict()
    if asymptotic is not None:
        body["asymptotic"] = asymptotic.to_dict()
    return build_document("fit", body, seed=seed, config=config)


def selection_document(report: SelectionReport, data: Optional[dict] = None, seed: Optional[int] = None,
                       config: Optional[dict] = None) -> Dict[str, Any]:
    return build_document("select", {"data": data or {}, "selection": report.to_dict()}, seed=seed, config=config)


def scenario_document(result: ScenarioResult, seed: Optional[int] = None) -> Dict[str, Any]:
    return build_document("simulate", result.to_dict(), seed=seed)


def _matrix_frame(m: np.ndarray, rows, columns) -> pd.DataFrame:
    rows = list(rows) or [f"y{i + 1}" for i in range(m.shape[0])]
    columns = list(columns) or [f"x{j + 1}" for j in range(m.shape[1])]
    return pd.DataFrame(m, index=rows, columns=columns)


def fit_table(fit: EnvelopeFit, response_names=(), predictor_names=(),
              bootstrap: Optional[BootstrapResult] = None, separator: str = "\t",
              asymptotic: Optional[AsymptoticResult] = None) -> str:
    """Coefficient table, one row per (response, predictor) pair"""
    beta = _matrix_frame(fit.beta, response_names, predictor_names)
    long = beta.stack().rename("estimate").to_frame()
    if bootstrap is not None:
        for name in ("se", "ci_low", "ci_high", "p_value"):
            long[name] = _matrix_frame(getattr(bootstrap, name), response_names, predictor_names).stack()
    if asymptotic is not None and asymptotic.se is not None:
        long["asymptotic_se"] = _matrix_frame(asymptotic.se, response_names, predictor_names).stack()
    long.index.names = ["response", "predictor"]
    header = (f"# {fit.method} {fit.label}; iterations={fit.iterations}; converged={fit.converged}; "
              f"q_value={fit.q_value:.10g}\n")
    return header + long.to_csv(sep=separator, float_format="%.10g")


def selection_table(report: SelectionReport, separator: str = "\t") -> str:
    frame = pd.DataFrame({"u": list(range(len(report.criterion)))})
    if report.criterion:
        frame["bic_q"] = report.criterion
    if report.mean_q2:
        frame = frame.merge(
            pd.DataFrame({"u": list(report.mean_q2), "mean_q2": list(report.mean_q2.values())}),
            on="u", how="outer").sort_values("u")
    header = f"# method={report.method}; chosen_u={report.chosen_u}; fallback_to_bicq={report.fallback}\n"
    return header + frame.to_csv(sep=separator, float_format="%.10g", index=False)


def scenario_table(result: ScenarioResult, separator: str = "\t") -> str:
    header = f"# scenario={result.spec.name}; reps={result.spec.reps}; seed={result.spec.seed}\n"
    return header + result.summary.to_text(separator)


def write_output(text: str, path: Optional[str] = None):
    """Write to path, or stdout when no path is given"""
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        logger.info(f"Report written to {path}")
    else:
        sys.stdout.write(text)
