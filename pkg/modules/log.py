"""
ログ設定モジュール
標準エラー出力に1行1イベントの構造化ログを出す
"""

import logging
import sys

from config import DEBUG

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s recording_id=%(recording_id)s %(message)s"


class _RecordingIdFilter(logging.Filter):
    """extra に recording_id が無いレコードへ "-" を補う"""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "recording_id"):
            record.recording_id = "-"
        return True


def setup_logging(debug: bool = DEBUG, stream=None) -> logging.Logger:
    """
    ルートロガーにstderrハンドラーを1つだけ設定する。
    Args:
        debug (bool): TrueならDEBUGレベル。
        stream: 出力先（既定はsys.stderr、テスト用に差し替え可）。
    Returns:
        logging.Logger: 設定済みのルートロガー。
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_asrbench", False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(stream or sys.stderr)
    handler._asrbench = True  # type: ignore[attr-defined]
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(_RecordingIdFilter())
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if debug else logging.INFO)
    return root
