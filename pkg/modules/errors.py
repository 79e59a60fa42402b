"""
例外定義モジュール
評価パイプライン全体で使う型付きエラー
"""


class AsrBenchError(Exception):
    """本パッケージの全エラーの基底クラス"""


class UndefinedMetricError(AsrBenchError, ValueError):
    """参照が空などで指標・比率が定義できない"""


class InvalidMeasurementError(AsrBenchError, ValueError):
    """処理時間が0以下など測定値が不正"""


class PreconditionError(AsrBenchError, ValueError):
    """インデックス範囲外などの事前条件違反"""


class ManifestError(AsrBenchError, ValueError):
    """マニフェストの解析エラー・参照整合性エラー"""


class SamplingError(AsrBenchError, ValueError):
    """サンプル数が母集団を超える"""


class AudioFormatError(AsrBenchError, ValueError):
    """WAVヘッダーが壊れている・PCMではない"""


class ConfigurationError(AsrBenchError):
    """認証情報の欠落、フラグの組み合わせ不正、設定ファイル不正"""


class DegenerateTestError(AsrBenchError, ValueError):
    """分散0などで検定が成立しない"""


class UndefinedCorrelationError(AsrBenchError, ValueError):
    """定数ベクトルで相関が定義できない"""


class EmptyGroupError(AsrBenchError, ValueError):
    """集計対象のグループが空"""


class ReportError(AsrBenchError, ValueError):
    """レポートを組み立てられない"""
