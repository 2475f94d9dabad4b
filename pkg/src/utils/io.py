"""
JSON / JSON Lines 讀寫
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Union

from ..errors import DataError

PathLike = Union[str, Path]


def write_json(path: PathLike, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # 固定鍵順序與縮排，重跑時輸出逐位元相同
    path.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise DataError(f"找不到檔案: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"JSON 格式錯誤 {path}: {e}") from e


def write_jsonl(path: PathLike, rows: Iterable[Dict[str, Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def iter_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"找不到檔案: {path}")
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no} JSON 格式錯誤: {e}") from e


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))
