#!/usr/bin/env python3
"""feti-eet 命令行入口

流程: 配置加载 → 网格/分区 → FETI-DP 求解 → 静力容许应力恢复 → 误差估计 → CSV/VTK 输出
用法: python scripts/pipeline.py run --config cfg.json [--preset table1|table2|fig9|fig10]
                                     [--out DIR] [--threads N] [--verbose]

退出码: 0 成功; 1 其他失败; 2 配置/网格错误; 3 求解器失败; 4 容许性检查失败。
扫描模式下单行失败不中断扫描，退出码取第一个失败行的异常类别。
"""
import argparse
import sys
import time
from datetime import datetime
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from rich.table import Table

import runlog
from config import OUT_ENV, PRESETS, load_config, resolve_output_dir
from errors import FetiEetError
from experiment import TABLE_COLUMNS, run_single, run_sweep
from runlog import atomic_write_json, console, log

SUMMARY_NAME = ".last_run.json"
CONFIG_USED = "config_used.json"
SHOWN_COLUMNS = ["scheme", "ratio", "mode", "iterations", "estimate", "relative", "effectivity", "status"]


# ── Steps ──
def run_step(name, fn, *args, **kwargs):
    """Run one stage; failures carry the stage name and are re-raised."""
    log(f"▶ {name}")
    start = time.time()
    try:
        value = fn(*args, **kwargs)
    except FetiEetError as err:
        err.stage = err.stage or name
        log(f"✗ {name} failed: {err} ({time.time() - start:.1f}s)", "ERROR")
        raise
    except Exception as e:
        log(f"✗ {name} exception: {type(e).__name__}: {e} ({time.time() - start:.1f}s)", "ERROR")
        raise FetiEetError(f"{type(e).__name__}: {e}", stage=name) from e
    log(f"✓ {name} done ({time.time() - start:.1f}s)")
    return value


def _cell(value):
    if isinstance(value, float):
        return f"{value:.4e}"
    return "" if value is None else str(value)


def print_rows(title, columns, rows):
    table = Table(title=title)
    for c in columns:
        table.add_column(c, justify="right" if c not in ("scheme", "mode", "status") else "left")
    for row in rows:
        table.add_row(*(_cell(row.get(c)) for c in columns))
    console().print(table)


def write_summary(results, start, started_at, out_dir, exit_code, outputs=()):
    elapsed = time.time() - start
    log("=" * 60)
    log(f"运行完成 ({elapsed:.0f}s)")
    for step, ok in results.items():
        status = "✓" if ok else "✗"
        log(f"  {status} {step}")
    log(f"日志: {runlog.LOG_PATH}")
    log("=" * 60)

    summary = {
        "run_id": runlog.RUN_ID,
        "started_at": started_at,
        "elapsed_seconds": round(elapsed),
        "results": dict(results),
        "all_ok": all(results.values()),
        "exit_code": exit_code,
        "outputs": [str(p) for p in outputs],
        "log_path": str(runlog.LOG_PATH) if runlog.LOG_PATH else None,
    }
    atomic_write_json(Path(out_dir) / SUMMARY_NAME, summary)


# ── CLI ──
def build_parser():
    parser = argparse.ArgumentParser(description="FETI-DP 子结构求解 + EET 应力恢复的保证误差估计")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="按配置运行一次实验或参数扫描")
    run.add_argument("--config", type=Path, help="JSON 配置文件（覆盖预设中的同名键）")
    run.add_argument("--preset", choices=PRESETS, help="内置预设")
    run.add_argument("--out", type=Path, help=f"输出目录（优先于环境变量 {OUT_ENV} 和 outputs.dir）")
    run.add_argument("--threads", type=_positive_int, default=1, help="子区域并行线程数 (默认 1)")
    run.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")
    return parser


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def main(argv=None):
    args = build_parser().parse_args(argv)
    start = time.time()
    started_at = datetime.now().isoformat()
    results = {}
    runlog.configure(None, args.verbose)

    try:
        config = run_step("配置加载", load_config, args.config, args.preset)
    except FetiEetError as err:
        log(f"配置错误 [{err.stage}]: {err}", "ERROR")
        return err.exit_code

    out_dir = resolve_output_dir(config, args.out)
    runlog.configure(out_dir / "logs", args.verbose)
    log("=" * 60)
    log(f"运行启动 (run_id={runlog.RUN_ID}, 输出: {out_dir})")
    log("=" * 60)
    results["配置加载"] = True
    atomic_write_json(out_dir / CONFIG_USED, config.to_dict())

    exit_code = 0
    outputs = []
    if config.is_sweep:
        try:
            sweep = run_step("参数扫描", run_sweep, config, out_dir, args.threads)
        except FetiEetError as err:
            results["参数扫描"] = False
            exit_code = err.exit_code
        else:
            results["参数扫描"] = not sweep.errors
            outputs = [out_dir / "results.csv", out_dir / "table.csv", *sweep.artifacts]
            print_rows("结果", SHOWN_COLUMNS, sweep.rows)
            print_rows("相对估计", TABLE_COLUMNS, sweep.table)
            if sweep.errors:
                log(f"{len(sweep.errors)}/{len(sweep.rows)} 个组合失败", "WARN")
                exit_code = sweep.errors[0].exit_code
    else:
        try:
            result = run_step("单次运行", run_single, config, out_dir, args.threads)
        except FetiEetError as err:
            results["单次运行"] = False
            exit_code = err.exit_code
        else:
            results["单次运行"] = True
            outputs = [out_dir / "results.csv", *result.artifacts]
            print_rows("结果", SHOWN_COLUMNS, [result.row])

    write_summary(results, start, started_at, out_dir, exit_code, outputs)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
