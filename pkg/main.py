#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import arrow
import click
from dotenv import load_dotenv

from src.config import PipelineConfig, load_config, override
from src.errors import ConfigError, DataError
from src import pipeline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

logger = logging.getLogger("relcue")


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _resolve_config(ctx: click.Context, **flags) -> PipelineConfig:
    """載入配置並套用 CLI 參數"""
    config = load_config(ctx.obj["config_path"])
    return override(
        config,
        seed=ctx.obj["seed"],
        jobs=ctx.obj["jobs"],
        **{"provider.kind": flags.get("provider")},
        **{"prompts.filter_similar": flags.get("filter_similar")},
    )


def _run(name: str, action: Callable[[], object]) -> object:
    started = arrow.utcnow()
    print(f"🔧 執行 {name} ...")
    result = action()
    elapsed = (arrow.utcnow() - started).total_seconds()
    logger.info("%s 完成，耗時 %.1f 秒", name, elapsed)
    print(f"✅ {name} 完成")
    return result


out_option = click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path), default=Path("out"),
                          show_default=True, help="輸出目錄")
split_option = click.option("--split", default=None, help="資料切分 (train / valid / test)")
provider_option = click.option("--provider", type=click.Choice(["oracle", "file"]), default=None,
                               help="嵌入提供者，覆寫 provider.kind")
filter_option = click.option("--filter-similar/--keep-similar", "filter_similar", default=None,
                             help="是否排除 similar / Same 線索")


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="TOML 配置檔")
@click.option("--seed", type=int, default=None, help="覆寫根種子")
@click.option("--jobs", type=int, default=None, help="平行工作數")
@click.option("--verbose", is_flag=True, help="輸出除錯訊息")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: Optional[int], jobs: Optional[int], verbose: bool):
    """相對線索目標語音擷取工具"""
    _configure_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, jobs=jobs)


@cli.command()
@out_option
@split_option
@click.option("--count", type=int, default=None, help="每個 split 產生的混合數")
@click.pass_context
def simulate(ctx, out: Path, split: Optional[str], count: Optional[int]):
    """模擬雙說話者殘響混合"""
    config = _resolve_config(ctx)
    produced = _run("simulate", lambda: pipeline.run_simulate(config, out, split, count))
    for name, n in produced.items():
        print(f"📊 {name}: {n} 筆混合")


@cli.command()
@out_option
@click.pass_context
def attributes(ctx, out: Path):
    """擷取清單中每句語音的屬性"""
    config = _resolve_config(ctx)
    n = _run("attributes", lambda: pipeline.run_attributes(config, out))
    print(f"📊 {n} 句語音")


@cli.command()
@out_option
@click.pass_context
def cues(ctx, out: Path):
    """擬合量化器並標註線索"""
    config = _resolve_config(ctx)
    n = _run("cues", lambda: pipeline.run_cues(config, out))
    print(f"📊 {n} 筆混合的線索")


@cli.command()
@out_option
@filter_option
@click.pass_context
def prompts(ctx, out: Path, filter_similar: Optional[bool]):
    """產生提示語"""
    config = _resolve_config(ctx, filter_similar=filter_similar)
    n = _run("prompts", lambda: pipeline.run_prompts(config, out))
    print(f"📊 {n} 句提示語")


@cli.command()
@out_option
@split_option
@provider_option
@filter_option
@click.pass_context
def train(ctx, out: Path, split: Optional[str], provider: Optional[str], filter_similar: Optional[bool]):
    """訓練投影頭"""
    config = _resolve_config(ctx, provider=provider, filter_similar=filter_similar)
    trace = _run("train", lambda: pipeline.run_train(config, out, split or "train"))
    if len(trace):
        print(f"📊 最終損失 {trace['loss'].iloc[-1]:.4f}（{len(trace)} 步）")


@cli.command()
@out_option
@split_option
@provider_option
@filter_option
@click.pass_context
def classify(ctx, out: Path, split: Optional[str], provider: Optional[str], filter_similar: Optional[bool]):
    """第二階段分類"""
    config = _resolve_config(ctx, provider=provider, filter_similar=filter_similar)
    n = _run("classify", lambda: pipeline.run_classify(config, out, split or "test"))
    print(f"📊 {n} 筆預測")


@cli.command()
@out_option
@split_option
@provider_option
@filter_option
@click.pass_context
def evaluate(ctx, out: Path, split: Optional[str], provider: Optional[str], filter_similar: Optional[bool]):
    """分類並計算 SI-SDR / SI-SDRi"""
    config = _resolve_config(ctx, provider=provider, filter_similar=filter_similar)
    frame = _run("evaluate", lambda: pipeline.run_evaluate(config, out, split or "test"))
    if len(frame):
        print(f"📊 準確率 {frame['correct'].mean():.2%}（{len(frame)} 句提示語）")


@cli.command()
@out_option
@split_option
@click.pass_context
def analyze(ctx, out: Path, split: Optional[str]):
    """產生報表"""
    config = _resolve_config(ctx)
    written = _run("analyze", lambda: pipeline.run_analyze(config, out, split))
    print(f"📊 輸出 {len(written)} 個檔案到 {out / 'report'}")


def main(argv=None) -> int:
    """執行 CLI 並把例外轉成結束碼"""
    load_dotenv()
    try:
        cli.main(args=argv, prog_name="relcue", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        print("❌ 已中止", file=sys.stderr)
        return EXIT_USAGE
    except click.ClickException as e:
        print(f"❌ {e.format_message()}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"❌ 配置錯誤 {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"❌ 資料錯誤 {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        logger.debug("未預期的錯誤", exc_info=True)
        print(f"❌ 內部錯誤 {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
