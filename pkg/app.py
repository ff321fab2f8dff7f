#!/usr/bin/env python
"""
CI 构建重放工具 - 命令行入口
ci-replay - command line entry point

    python app.py mine --offline --fixtures tests/fixtures/forge
    python app.py reconstruct --plan-only
    python app.py parse build.log
    python app.py compare --sample 50 --seed 7
    python app.py report --pdf report.pdf
"""
# -*- coding: utf-8 -*-
import sys

# 设置UTF-8编码（Windows兼容性）
if sys.platform.startswith('win'):
    try:
        sys.stdout.reconfigure(encoding='utf-8', errors='replace')
        sys.stderr.reconfigure(encoding='utf-8', errors='replace')
    except AttributeError:
        pass

from ci_replay.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
