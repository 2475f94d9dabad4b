"""
評估彙整

逐線索準確率、準確率對屬性差值的邏輯迴歸、獨立類別 × 相對類別交叉表，以及報表輸出。
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.special import expit
from scipy.stats import norm

from ..cues.cue_engine import SAME, SIMILAR, IndependentQuantizer, ThresholdTable
from ..errors import DataError
from ..utils.io import write_json

logger = logging.getLogger(__name__)

WILSON_Z = float(norm.ppf(0.975))
RIDGE = 1e-6
MAX_NEWTON_ITERATIONS = 100
GRADIENT_TOLERANCE = 1e-8

EVAL_COLUMNS = [
    "mixture_id", "split", "cue_type", "prompt_config", "prompt_kind", "prompt_text",
    "true_label", "pred_label", "correct", "prob", "logit",
    "si_sdr", "si_sdri", "delta", "relative_category",
    "tar_value", "inf_value", "tar_category", "inf_category", "leak_db",
]


class EvalRow(BaseModel):
    """一句提示語的評估結果"""
    mixture_id: str
    split: str = "test"
    cue_type: str
    prompt_config: str
    prompt_kind: str = "relative"
    prompt_text: str = ""
    true_label: int
    pred_label: int
    prob: float
    logit: float = 0.0
    si_sdr: Optional[float] = None
    si_sdri: Optional[float] = None
    delta: Optional[float] = None
    relative_category: Optional[str] = None
    tar_value: Optional[float] = None
    inf_value: Optional[float] = None
    tar_category: Optional[str] = None
    inf_category: Optional[str] = None
    leak_db: Optional[float] = None

    @property
    def correct(self) -> bool:
        return self.true_label == self.pred_label


def rows_to_frame(rows: Iterable[EvalRow]) -> pd.DataFrame:
    records = [{**row.model_dump(), "correct": row.correct} for row in rows]
    return pd.DataFrame.from_records(records, columns=EVAL_COLUMNS)


def frame_to_rows(frame: pd.DataFrame) -> List[EvalRow]:
    frame = frame.astype(object).where(pd.notna(frame), None)
    return [EvalRow.model_validate({k: v for k, v in row.items() if k != "correct" and v is not None})
            for row in frame.to_dict(orient="records")]


def wilson_interval(correct: int, n: int, z: float = WILSON_Z) -> Tuple[float, float]:
    """Wilson 分數區間"""
    if n == 0:
        return float("nan"), float("nan")
    p = correct / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return float(centre - half), float(centre + half)


def _as_frame(rows) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        return rows
    return rows_to_frame(rows)


def _summarize(group: pd.DataFrame) -> pd.Series:
    n = int(len(group))
    correct = int(group["correct"].sum())
    low, high = wilson_interval(correct, n)
    sdri = pd.to_numeric(group["si_sdri"], errors="coerce")
    return pd.Series({
        "n": n,
        "correct": correct,
        "acc": correct / n if n else float("nan"),
        "ci_low": low,
        "ci_high": high,
        "mean_si_sdri": float(sdri.mean()) if sdri.notna().any() else float("nan"),
    })


def accuracy_by_cue(rows, by: Sequence[str] = ("cue_type",)) -> pd.DataFrame:
    """依線索分組的 N、準確率（含 Wilson 95% 區間）與平均 SI-SDRi"""
    frame = _as_frame(rows)
    if frame.empty:
        raise DataError("評估資料為空")
    table = frame.groupby(list(by), sort=True).apply(_summarize, include_groups=False).reset_index()
    table["n"] = table["n"].astype(int)
    table["correct"] = table["correct"].astype(int)
    return table


def logistic_fit_1d(x: Sequence[float], y: Sequence[int], ridge: float = RIDGE) -> Tuple[float, float]:
    """
    一維邏輯迴歸的最大概似估計

    阻尼牛頓法，L2 ridge 讓可分資料也有有限解；梯度範數小於 1e-8 或 100 次迭代後停止。
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.size != y.size:
        raise DataError("邏輯迴歸至少需要兩個點，且 x 與 y 長度一致")
    if np.all(y == y[0]):
        raise DataError("邏輯迴歸需要兩種類別都出現")
    design = np.column_stack([np.ones_like(x), x])

    def objective(w: np.ndarray) -> float:
        t = design @ w
        return float(np.sum(np.logaddexp(0.0, t) - y * t) + 0.5 * ridge * w @ w)

    w = np.zeros(2)
    current = objective(w)
    for _ in range(MAX_NEWTON_ITERATIONS):
        p = expit(design @ w)
        grad = design.T @ (p - y) + ridge * w
        if np.linalg.norm(grad) < GRADIENT_TOLERANCE:
            break
        hessian = (design * (p * (1 - p))[:, None]).T @ design + ridge * np.eye(2)
        step = np.linalg.solve(hessian, grad)
        scale = 1.0
        while scale > 1e-10:
            candidate = w - scale * step
            value = objective(candidate)
            if value <= current:
                w, current = candidate, value
                break
            scale *= 0.5
        else:
            break
    return float(w[0]), float(w[1])


def accuracy_by_delta(rows, bins: int = 10) -> pd.DataFrame:
    """
    每個連續線索的 |delta| 分箱準確率與邏輯迴歸擬合曲線

    欄位: cue_type, abs_delta, n, acc, fitted, intercept, slope
    """
    frame = _as_frame(rows)
    frame = frame[frame["delta"].notna()]
    columns = ["cue_type", "abs_delta", "n", "acc", "fitted", "intercept", "slope"]
    series = []
    for cue, group in frame.groupby("cue_type", sort=True):
        x = np.abs(group["delta"].astype(float).to_numpy())
        y = group["correct"].astype(int).to_numpy()
        try:
            intercept, slope = logistic_fit_1d(x, y)
        except DataError:
            intercept, slope = float("nan"), float("nan")
        edges = np.linspace(x.min(), x.max(), bins + 1) if x.max() > x.min() else np.array([x.min(), x.min() + 1.0])
        index = np.clip(np.digitize(x, edges[1:-1]), 0, len(edges) - 2)
        for b in range(len(edges) - 1):
            mask = index == b
            if not np.any(mask):
                continue
            centre = 0.5 * (edges[b] + edges[b + 1])
            series.append({
                "cue_type": cue,
                "abs_delta": float(centre),
                "n": int(mask.sum()),
                "acc": float(y[mask].mean()),
                "fitted": float(expit(intercept + slope * centre)) if np.isfinite(slope) else float("nan"),
                "intercept": intercept,
                "slope": slope,
            })
    return pd.DataFrame(series, columns=columns)


def independent_group(q: IndependentQuantizer, tar_value: float, inf_value: float) -> str:
    """same / adjacent / distinct；adjacent 只用於三類別"""
    gap = abs(q.bin_index(tar_value) - q.bin_index(inf_value))
    if gap == 0:
        return "same"
    if gap == 1 and len(q.categories) == 3:
        return "adjacent"
    return "distinct"


def group_crosstab(rows, quantizers: Mapping[str, IndependentQuantizer],
                   thresholds: Optional[ThresholdTable] = None) -> pd.DataFrame:
    """
    獨立類別關係 × 相對類別的交叉表

    每個線索輸出 {same, adjacent, distinct, all} × {similar, non-similar, all} 的 N 與準確率。
    只計入有量化器且兩位說話者都有屬性值的列。
    """
    frame = _as_frame(rows)
    frame = frame[frame["cue_type"].isin(list(quantizers)) & frame["tar_value"].notna() & frame["inf_value"].notna()]
    frame = frame[frame["prompt_kind"] == "relative"]
    columns = ["cue_type", "independent_group", "relative_group", "n", "correct", "acc", "ci_low", "ci_high"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    frame = frame.copy()
    frame["independent_group"] = [
        independent_group(quantizers[cue], float(t), float(i))
        for cue, t, i in zip(frame["cue_type"], frame["tar_value"], frame["inf_value"])
    ]
    frame["relative_group"] = np.where(frame["relative_category"].isin([SIMILAR, SAME]), "similar", "non-similar")

    out = []
    for cue, group in frame.groupby("cue_type", sort=True):
        groups = ["same", "adjacent", "distinct"] if len(quantizers[cue].categories) == 3 else ["same", "distinct"]
        for ind in groups + ["all"]:
            for rel in ("similar", "non-similar", "all"):
                mask = np.ones(len(group), dtype=bool)
                if ind != "all":
                    mask &= (group["independent_group"] == ind).to_numpy()
                if rel != "all":
                    mask &= (group["relative_group"] == rel).to_numpy()
                n = int(mask.sum())
                correct = int(group["correct"].to_numpy()[mask].sum())
                low, high = wilson_interval(correct, n)
                out.append({
                    "cue_type": cue, "independent_group": ind, "relative_group": rel,
                    "n": n, "correct": correct, "acc": correct / n if n else float("nan"),
                    "ci_low": low, "ci_high": high,
                })
    return pd.DataFrame(out, columns=columns)


def cue_distribution(labels: Iterable[Mapping]) -> pd.DataFrame:
    """
    資料集中各線索相對類別的數量

    labels 為 {"split", "attribute", "kind", "category"} 的映射序列。
    """
    frame = pd.DataFrame.from_records(list(labels), columns=["split", "attribute", "kind", "category"])
    frame = frame[frame["kind"] == "relative"]
    columns = ["split", "attribute", "category", "count"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    return (frame.groupby(["split", "attribute", "category"], sort=True).size()
            .rename("count").reset_index()[columns])


def _hash_json(data) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


def hash_files(paths: Iterable[Union[str, Path]]) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def export_report(tables: Mapping[str, pd.DataFrame], path: Union[str, Path],
                  dataset_hash: str = "", config: Optional[Mapping] = None, seed: int = 0) -> List[Path]:
    """每個表一個 CSV，加上 provenance.json（資料集雜湊、配置雜湊、種子）"""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in sorted(tables.items()):
        target = directory / f"{name}.csv"
        table.to_csv(target, index=False, float_format="%.6g", lineterminator="\n")
        written.append(target)
    provenance = {
        "dataset_hash": dataset_hash,
        "config_hash": _hash_json(dict(config or {})),
        "seed": seed,
        "tables": sorted(tables),
    }
    write_json(directory / "provenance.json", provenance)
    written.append(directory / "provenance.json")
    logger.info("報表輸出到 %s (%d 個表)", directory, len(tables))
    return written
