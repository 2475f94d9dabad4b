"""
命令實作

每個 CLI 命令對應一個 run_* 函式，只讀寫固定的檔案位置；時間戳不寫入輸出檔。
"""
import logging
from functools import partial
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import pandas as pd
from tqdm import tqdm

from .audio.attributes import AttributeVector, load_manifest, profile_utterance
from .audio.mixer import MixturePlan, MixtureRecord, build_dataset, oracle_separate, trim_bounds
from .audio.wave_core import WaveBuffer, read_wav, si_sdr, si_sdri, write_wav
from .config import EFFECTIVE_CONFIG_NAME, PipelineConfig, config_dict, dump_config
from .cues.cue_engine import (
    CueKind,
    CueLabel,
    IndependentQuantizer,
    ThresholdTable,
    attribute_delta,
    cue_labels_for_pair,
    fit_quantizers,
    load_quantizers,
    load_thresholds,
    save_quantizers,
    save_thresholds,
)
from .cues.prompt_gen import PromptRecord, PromptSettings, generate_prompts
from .errors import DataError
from .evaluation.analysis import (
    EvalRow,
    accuracy_by_cue,
    accuracy_by_delta,
    cue_distribution,
    export_report,
    frame_to_rows,
    group_crosstab,
    hash_files,
    rows_to_frame,
)
from .stage2.classifier import (
    ClassificationResult,
    ProjectionHead,
    classify_mixture,
    initial_head,
    train_projection,
    training_examples,
)
from .stage2.embeddings import make_provider
from .utils.io import iter_jsonl, read_json, read_jsonl, write_json, write_jsonl
from .utils.seeding import derive_rng

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
COMPONENT_FILES = {"mixture": "mixture.wav", "target": "target.wav", "interference": "interference.wav"}


def annotate_record(record: MixtureRecord, thresholds: ThresholdTable, prompt_settings: PromptSettings,
                    seed: int) -> MixtureRecord:
    """相對線索與提示語；獨立線索需要訓練集量化器，由 cues 命令補上"""
    labels = cue_labels_for_pair(record.attributes_tar, record.attributes_inf, thresholds)
    rng = derive_rng(seed, "prompts", record.mixture_id)
    prompts = generate_prompts(labels, rng, record.mixture_id, record.plan.target_index, prompt_settings)
    return record.with_annotations(cue_labels=labels, prompts=prompts)


def record_to_meta(record: MixtureRecord) -> Dict:
    return {
        "mixture_id": record.mixture_id,
        "plan": record.plan.model_dump(mode="json"),
        "gain": record.gain,
        "absorption": list(record.absorption),
        "attributes": {
            "1": record.attributes1.model_dump(mode="json") if record.attributes1 else None,
            "2": record.attributes2.model_dump(mode="json") if record.attributes2 else None,
        },
        "cue_labels": [label.model_dump(mode="json") for label in record.cue_labels],
        "prompts": [prompt.model_dump(mode="json") for prompt in record.prompts],
        "files": dict(COMPONENT_FILES),
    }


def write_record(record: MixtureRecord, root: Path) -> Path:
    """<root>/<split>/<mixture_id>/ 下的三個 WAV 與 meta.json"""
    directory = root / record.plan.split / record.mixture_id
    write_wav(directory / COMPONENT_FILES["mixture"], record.mixture)
    write_wav(directory / COMPONENT_FILES["target"], record.rev_target)
    write_wav(directory / COMPONENT_FILES["interference"], record.rev_interf)
    write_json(directory / "meta.json", record_to_meta(record))
    return directory / "meta.json"


def read_record(meta_path: Path, with_audio: bool = True) -> MixtureRecord:
    """讀回 meta.json；with_audio=False 時音訊以空白緩衝代替"""
    meta = read_json(meta_path)
    try:
        plan = MixturePlan.model_validate(meta["plan"])
        attributes = {k: AttributeVector.model_validate(v) if v else None for k, v in meta["attributes"].items()}
        labels = [CueLabel.model_validate(row) for row in meta.get("cue_labels", [])]
        prompts = [PromptRecord.model_validate(row) for row in meta.get("prompts", [])]
    except (KeyError, ValueError) as e:
        raise DataError(f"meta 檔格式錯誤 {meta_path}: {e}") from e
    directory = meta_path.parent
    if with_audio:
        mixture = read_wav(directory / meta["files"]["mixture"])
        target = read_wav(directory / meta["files"]["target"])
        interference = read_wav(directory / meta["files"]["interference"])
    else:
        mixture = target = interference = WaveBuffer([0.0])
    rev1, rev2 = (target, interference) if plan.target_index == 1 else (interference, target)
    return MixtureRecord(
        plan=plan,
        mixture=mixture,
        rev1=rev1,
        rev2=rev2,
        gain=float(meta["gain"]),
        absorption=tuple(meta.get("absorption", (0.0, 0.0))),
        attributes1=attributes.get("1"),
        attributes2=attributes.get("2"),
        cue_labels=labels,
        prompts=prompts,
    )


def _write_effective_config(config: PipelineConfig, out: Path) -> None:
    dump_config(config, out / EFFECTIVE_CONFIG_NAME)


def _requested_splits(config: PipelineConfig, split: Optional[str]) -> List[str]:
    if split is None:
        return [s for s, n in config.dataset.counts.items() if n > 0]
    return [split]


def load_index(out: Path) -> Dict[str, List[Dict[str, str]]]:
    path = out / INDEX_NAME
    if not path.exists():
        raise DataError(f"找不到資料集索引 {path}，請先執行 simulate")
    return read_json(path)["splits"]


def iter_records(out: Path, split: Optional[str] = None, with_audio: bool = True) -> Iterable[MixtureRecord]:
    for name, entries in sorted(load_index(out).items()):
        if split is not None and name != split:
            continue
        for entry in entries:
            yield read_record(out / entry["meta"], with_audio)


def run_simulate(config: PipelineConfig, out: Path, split: Optional[str] = None,
                 count: Optional[int] = None) -> Dict[str, int]:
    """產生混合資料集並寫出 index.json"""
    if not config.dataset.manifest:
        raise DataError("dataset.manifest 未設定，無法模擬")
    utterances = load_manifest(config.dataset.manifest, config.dataset.max_source_s)
    annotate = partial(annotate_record, thresholds=config.cues.threshold_table(),
                       prompt_settings=config.prompts, seed=config.seed)
    index_path = out / INDEX_NAME
    index = read_json(index_path)["splits"] if index_path.exists() else {}
    produced = {}
    for name in _requested_splits(config, split):
        n = count if count is not None else config.dataset.counts.get(name, 0)
        entries = []
        records = build_dataset(utterances, name, n, config.seed, config.room, config.mixer,
                                config.attributes, jobs=config.jobs, annotate=annotate)
        for record in tqdm(records, total=n, desc=f"模擬 {name}"):
            meta_path = write_record(record, out)
            entries.append({"mixture_id": record.mixture_id, "split": name,
                            "meta": meta_path.relative_to(out).as_posix()})
        index[name] = entries
        produced[name] = len(entries)
    write_json(index_path, {"splits": index})
    _write_effective_config(config, out)
    return produced


def run_attributes(config: PipelineConfig, out: Path) -> int:
    """清單中每句乾淨語音的屬性"""
    if not config.dataset.manifest:
        raise DataError("dataset.manifest 未設定")
    utterances = load_manifest(config.dataset.manifest, config.dataset.max_source_s)

    def rows():
        for meta in tqdm(utterances, desc="擷取屬性"):
            w = read_wav(meta.path)
            start, end = trim_bounds(w, meta, config.attributes)
            profile = profile_utterance(w.crop(start, end), meta.shifted(start), config.attributes)
            row = profile.model_dump(mode="json")
            row.update({"split": meta.split, "speaker_id": meta.speaker_id, "language": meta.language.value,
                        "gender": meta.gender.value, "age_years": meta.age_years, "emotion": meta.emotion})
            yield row

    written = write_jsonl(out / "attributes.jsonl", rows())
    _write_effective_config(config, out)
    return written


def run_cues(config: PipelineConfig, out: Path) -> int:
    """以訓練集擬合量化器，為每筆混合輸出相對與獨立線索"""
    records = list(iter_records(out, with_audio=False))
    fit_vectors = [
        vector
        for record in records if record.plan.split == config.cues.fit_split
        for vector in (record.attributes1, record.attributes2) if vector is not None
    ]
    if not fit_vectors:
        raise DataError(f"split '{config.cues.fit_split}' 沒有可用來擬合量化器的混合")
    thresholds = config.cues.threshold_table()
    quantizers = fit_quantizers(fit_vectors, config.cues.independent_categories)
    save_thresholds(thresholds, out / "cues" / "thresholds.json")
    save_quantizers(quantizers, out / "cues" / "quantizers.json")

    def rows():
        for record in records:
            labels = cue_labels_for_pair(record.attributes_tar, record.attributes_inf, thresholds, quantizers)
            yield {
                "mixture_id": record.mixture_id,
                "split": record.plan.split,
                "target_index": record.plan.target_index,
                "labels": [label.model_dump(mode="json") for label in labels],
            }

    written = write_jsonl(out / "cues" / "labels.jsonl", rows())
    _write_effective_config(config, out)
    return written


def run_prompts(config: PipelineConfig, out: Path) -> int:
    def rows():
        for row in iter_jsonl(out / "cues" / "labels.jsonl"):
            labels = [CueLabel.model_validate(label) for label in row["labels"]]
            rng = derive_rng(config.seed, "prompts", row["mixture_id"])
            for prompt in generate_prompts(labels, rng, row["mixture_id"], row["target_index"], config.prompts):
                yield {"split": row["split"], **prompt.model_dump(mode="json")}

    written = write_jsonl(out / "prompts" / "prompts.jsonl", rows())
    _write_effective_config(config, out)
    return written


def load_prompts(out: Path, split: Optional[str] = None, filter_similar: bool = False) -> List[PromptRecord]:
    prompts = []
    for row in iter_jsonl(out / "prompts" / "prompts.jsonl"):
        if split is not None and row.get("split") != split:
            continue
        prompt = PromptRecord.model_validate({k: v for k, v in row.items() if k != "split"})
        if filter_similar and any(c in ("similar", "Same") for c in prompt.categories):
            continue
        prompts.append(prompt)
    return prompts


def run_train(config: PipelineConfig, out: Path, split: str = "train") -> pd.DataFrame:
    """訓練投影頭，寫出 head.bin 與 loss_trace.csv"""
    provider = make_provider(config.provider, config.seed)
    records = list(iter_records(out, split))
    prompts = [p for p in load_prompts(out, split, config.prompts.filter_similar) if p.kind == CueKind.RELATIVE]
    if not prompts:
        raise DataError(f"split '{split}' 沒有可訓練的提示語")
    examples = training_examples(records, prompts, provider, config.seed, config.separation.leak_db)
    d_text, d_audio = len(examples[0].z_p_raw), len(examples[0].z_1)
    schedule = config.training.model_copy(update={"seed": config.seed})
    result = train_projection(examples, initial_head(d_text, d_audio, schedule), config.classifier, schedule,
                              progress=True)
    result.head.save(out / "head" / "head.bin")
    result.trace.to_csv(out / "head" / "loss_trace.csv", index=False, lineterminator="\n")
    _write_effective_config(config, out)
    return result.trace


def _load_head(out: Path) -> Optional[ProjectionHead]:
    path = out / "head" / "head.bin"
    return ProjectionHead.load(path) if path.exists() else None


def _classify_all(config: PipelineConfig, out: Path, split: str
                  ) -> List[Tuple[MixtureRecord, Optional[PromptRecord], ClassificationResult]]:
    provider = make_provider(config.provider, config.seed)
    head = _load_head(out)
    records = {r.mixture_id: r for r in iter_records(out, split)}
    if not records:
        raise DataError(f"split '{split}' 沒有混合")
    results = []
    if config.separation.enrollment:
        for record in tqdm(records.values(), desc="註冊音訊分類"):
            results.append((record, None, classify_mixture(
                record, None, provider, head, config.classifier,
                leak_db=config.separation.leak_db, enrollment=True)))
        return results
    for prompt in tqdm(load_prompts(out, split, config.prompts.filter_similar), desc=f"分類 {split}"):
        record = records.get(prompt.mixture_id)
        if record is None:
            raise DataError(f"提示語指向不存在的混合: {prompt.mixture_id}")
        results.append((record, prompt, classify_mixture(
            record, prompt, provider, head, config.classifier, leak_db=config.separation.leak_db)))
    return results


def run_classify(config: PipelineConfig, out: Path, split: str = "test") -> int:
    def rows():
        for _, prompt, result in _classify_all(config, out, split):
            row = result.model_dump(mode="json")
            row.update({
                "prompt_text": prompt.text if prompt else "",
                "prompt_config": prompt.config.value if prompt else "enrollment",
                "cue_types": prompt.cue_types if prompt else [],
            })
            yield row

    written = write_jsonl(out / "predictions" / f"{split}.jsonl", rows())
    _write_effective_config(config, out)
    return written


def _cue_type(prompt: Optional[PromptRecord]) -> str:
    if prompt is None:
        return "enrollment"
    if len(prompt.cue_types) == 1:
        return prompt.cue_types[0]
    return f"{prompt.config.value}_cues"


def eval_row(record: MixtureRecord, prompt: Optional[PromptRecord], result: ClassificationResult,
             thresholds: ThresholdTable, quantizers: Dict[str, IndependentQuantizer],
             leak_db: Optional[float] = None) -> EvalRow:
    """分類結果加上 SI-SDR、SI-SDRi 與屬性差值"""
    estimates = oracle_separate(record, leak_db)
    chosen = estimates[result.pred_index - 1]
    cue = _cue_type(prompt)
    delta = tar_value = inf_value = None
    relative = tar_category = inf_category = None
    if prompt is not None and len(prompt.cue_types) == 1:
        relative = prompt.categories[0]
        tar_value = record.attributes_tar.value(cue)
        inf_value = record.attributes_inf.value(cue)
        if not isinstance(tar_value, (int, float)) or not isinstance(inf_value, (int, float)):
            tar_value = inf_value = None
        elif cue in thresholds.entries:
            try:
                delta = attribute_delta(cue, tar_value, inf_value, thresholds)
            except DataError:
                delta = None
        if cue in quantizers and tar_value is not None:
            tar_category = quantizers[cue].category(tar_value)
            inf_category = quantizers[cue].category(inf_value)
    return EvalRow(
        mixture_id=record.mixture_id,
        split=record.plan.split,
        cue_type=cue,
        prompt_config=prompt.config.value if prompt else "enrollment",
        prompt_kind=prompt.kind.value if prompt else "enrollment",
        prompt_text=prompt.text if prompt else "",
        true_label=result.label,
        pred_label=1 if result.pred_index == 1 else 0,
        prob=result.prob,
        logit=result.logit,
        si_sdr=si_sdr(chosen, record.rev_target),
        si_sdri=si_sdri(chosen, record.rev_target, record.mixture),
        delta=delta,
        relative_category=relative,
        tar_value=tar_value,
        inf_value=inf_value,
        tar_category=tar_category,
        inf_category=inf_category,
        leak_db=leak_db,
    )


def _cue_tables(out: Path, config: PipelineConfig) -> Tuple[ThresholdTable, Dict[str, IndependentQuantizer]]:
    thresholds_path = out / "cues" / "thresholds.json"
    quantizers_path = out / "cues" / "quantizers.json"
    thresholds = load_thresholds(thresholds_path) if thresholds_path.exists() else config.cues.threshold_table()
    quantizers = load_quantizers(quantizers_path) if quantizers_path.exists() else {}
    return thresholds, quantizers


def run_evaluate(config: PipelineConfig, out: Path, split: str = "test") -> pd.DataFrame:
    """分類並計算分離品質，寫出 eval/<split>_rows.csv"""
    thresholds, quantizers = _cue_tables(out, config)
    rows = [
        eval_row(record, prompt, result, thresholds, quantizers, config.separation.leak_db)
        for record, prompt, result in _classify_all(config, out, split)
    ]
    frame = rows_to_frame(rows)
    path = out / "eval" / f"{split}_rows.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
    _write_effective_config(config, out)
    return frame


def run_analyze(config: PipelineConfig, out: Path, split: Optional[str] = None) -> List[Path]:
    """由評估列產生報表 CSV 與 provenance.json"""
    pattern = f"{split}_rows.csv" if split else "*_rows.csv"
    paths = sorted((out / "eval").glob(pattern))
    if not paths:
        raise DataError(f"找不到評估結果 {out / 'eval' / pattern}，請先執行 evaluate")
    frame = rows_to_frame(frame_to_rows(pd.concat([pd.read_csv(p) for p in paths], ignore_index=True)))
    thresholds, quantizers = _cue_tables(out, config)

    tables = {
        "accuracy_by_cue": accuracy_by_cue(frame, ("prompt_kind", "prompt_config", "cue_type")),
        "accuracy_by_config": accuracy_by_cue(frame, ("prompt_kind", "prompt_config")),
        "accuracy_by_delta": accuracy_by_delta(frame),
        "group_crosstab": group_crosstab(frame, quantizers, thresholds),
    }
    labels_path = out / "cues" / "labels.jsonl"
    if labels_path.exists():
        tables["cue_distribution"] = cue_distribution(
            {"split": row["split"], **label} for row in read_jsonl(labels_path) for label in row["labels"]
        )
    hashed = [out / INDEX_NAME] + ([labels_path] if labels_path.exists() else [])
    written = export_report(tables, out / "report", hash_files(p for p in hashed if p.exists()),
                            config_dict(config), config.seed)
    _write_effective_config(config, out)
    return written
