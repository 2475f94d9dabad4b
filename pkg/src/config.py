"""
管線配置

優先順序（高到低）: CLI 參數、RELCUE_ 環境變數（巢狀以 __ 分隔）、.env、--config 指定的 TOML、內建預設。
"""
import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import tomli_w
from pydantic import BaseModel, ValidationError, field_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from .audio.attributes import AttributeSettings
from .audio.mixer import MixerSettings
from .audio.room_sim import RoomSettings
from .cues.cue_engine import CueSettings
from .cues.prompt_gen import PromptSettings
from .errors import ConfigError
from .stage2.classifier import ClassifierConfig, TrainingSchedule
from .stage2.embeddings import ProviderSettings

EFFECTIVE_CONFIG_NAME = "config.effective.toml"


class DatasetSettings(BaseModel):
    """資料集來源與數量"""
    manifest: Optional[str] = None
    counts: Dict[str, int] = {"train": 100000, "valid": 10000, "test": 10000}
    max_source_s: float = 12.0

    @field_validator("counts")
    @classmethod
    def _non_negative(cls, value):
        for split, count in value.items():
            if count < 0:
                raise ValueError(f"{split} 數量不可為負: {count}")
        return value


class SeparationSettings(BaseModel):
    """oracle 分離與註冊模式"""
    leak_db: Optional[float] = None
    enrollment: bool = False

    @field_validator("leak_db")
    @classmethod
    def _positive(cls, value):
        if value is not None and value <= 0:
            raise ValueError(f"leak_db 必須為正: {value}")
        return value


class PipelineConfig(BaseSettings):
    """整條管線的設定"""
    model_config = SettingsConfigDict(env_prefix="RELCUE_", env_nested_delimiter="__", extra="forbid")

    seed: int = 0
    jobs: int = 1
    dataset: DatasetSettings = DatasetSettings()
    room: RoomSettings = RoomSettings()
    mixer: MixerSettings = MixerSettings()
    attributes: AttributeSettings = AttributeSettings()
    cues: CueSettings = CueSettings()
    prompts: PromptSettings = PromptSettings()
    provider: ProviderSettings = ProviderSettings()
    classifier: ClassifierConfig = ClassifierConfig()
    training: TrainingSchedule = TrainingSchedule()
    separation: SeparationSettings = SeparationSettings()

    @field_validator("jobs")
    @classmethod
    def _jobs(cls, value):
        if value < 1:
            raise ValueError(f"jobs 至少為 1: {value}")
        return value

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls,
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # TOML 內容經由 init 傳入，環境變數優先
        return env_settings, init_settings


def _field_name(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ())) or "config"


def build_config(data: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """由字典（通常來自 TOML）建立配置，驗證錯誤轉成帶欄位名稱的 ConfigError"""
    try:
        return PipelineConfig(**(data or {}))
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_field_name(first), first.get("msg", str(e))) from e


def load_config(path: Union[str, Path, None] = None) -> PipelineConfig:
    if path is None:
        return build_config()
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"找不到配置檔 {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("--config", f"TOML 格式錯誤: {e}") from e
    return build_config(data)


def override(config: PipelineConfig, **changes: Any) -> PipelineConfig:
    """
    套用 CLI 參數，鍵可用點號指向巢狀欄位，例如 provider.kind

    值為 None 的項目忽略。
    """
    data = config.model_dump(mode="json")
    for dotted, value in changes.items():
        if value is None:
            continue
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_field_name(first), first.get("msg", str(e))) from e


def _drop_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_drop_none(v) for v in value]
    return value


def config_dict(config: PipelineConfig) -> Dict[str, Any]:
    return _drop_none(config.model_dump(mode="json"))


def dump_config(config: PipelineConfig, path: Union[str, Path]) -> Path:
    """寫出有效配置；重新載入後得到相同的設定"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps(config_dict(config)), encoding="utf-8")
    return path


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config_dict(config), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
