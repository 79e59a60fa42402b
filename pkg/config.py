# ASR Bench - 設定ファイル

# ディレクトリパス
CACHE_DIR = "cache"
OUTPUT_RECORDS = "records.jsonl"
OUTPUT_REPORT = "report.json"

TOOL_VERSION = "0.3.0"

# デバッグモード
DEBUG = False

# テキスト正規化
DEFAULT_FILLER_TOKENS = ("um", "uh")
# 行頭の "speaker 0  00:00:00" 形式（RevAIのテキスト出力）
DEFAULT_SPEAKER_STAMP_PATTERN = r"^\s*(?:speaker\s*)?\d+\s+(?:\d{1,2}:)?\d{1,2}:\d{2}(?:[.,]\d+)?\s*"

# ファイル読み込み時に順番に試すエンコーディング
TEXT_ENCODINGS = ["utf-8", "utf-8-sig", "shift_jis", "cp932"]

# ワードリスト/プロンプトのコメント記号
COMMENT_PREFIX = "#"

# 乱数サンプリングの既定シード
DEFAULT_SEED = 20240501

# 文字起こし実行設定
POLL_INTERVAL_S = 1.0      # 非同期APIのポーリング間隔（秒）
DEFAULT_TIMEOUT_S = 300.0  # 1リクエストあたりの上限（秒）
DEFAULT_MAX_CONCURRENCY = 4
TRANSPORT_RETRIES = 1      # 通信エラー時のみ1回リトライ

CONDITIONS = ("omitted", "retained")
SPEECH_TYPES = ("read", "spontaneous")
GENDERS = ("F", "M")

# バックエンド別設定
BACKEND_CONFIG = {
    "assemblyai": {
        "env_var": "ASRBENCH_ASSEMBLYAI_KEY",
        "base_url": "https://api.assemblyai.com/v2",
        "min_audio_seconds": None,
    },
    "deepgram": {
        "env_var": "ASRBENCH_DEEPGRAM_KEY",
        "base_url": "https://api.deepgram.com/v1",
        "model": "nova-2",
        "min_audio_seconds": None,
    },
    "revai": {
        "env_var": "ASRBENCH_REVAI_KEY",
        "base_url": "https://api.rev.ai/speechtotext/v1",
        # 2秒未満の音声はAPIに拒否される
        "min_audio_seconds": 2.0,
    },
    "speechmatics": {
        "env_var": "ASRBENCH_SPEECHMATICS_KEY",
        "base_url": "https://asr.api.speechmatics.com/v2",
        "language": "en",
        "min_audio_seconds": None,
    },
    "whisper_replicate": {
        "env_var": "ASRBENCH_REPLICATE_KEY",
        "base_url": "https://api.replicate.com/v1",
        # バージョン指定なしで公式モデルの最新版を使う
        "model_path": "openai/whisper",
        "model": "large-v3",
        "min_audio_seconds": None,
    },
    "replay": {
        "env_var": None,
        "base_url": None,
        "min_audio_seconds": None,
    },
}

LIVE_BACKENDS = ("assemblyai", "deepgram", "revai", "speechmatics", "whisper_replicate")

# レポート設定
REPORT_DECIMALS = 3
# 既定のグルーピング（GroupKeyテンプレート: 指定するフィールド名の組）
DEFAULT_GROUPINGS = [
    ("system", "condition"),
    ("system", "l1"),
    ("system", "gender"),
    ("system", "speech_type"),
]

# 評価レコードの出力カラム順
RECORD_COLUMNS = [
    "recording_id",
    "speaker_id",
    "l1",
    "gender",
    "speech_type",
    "backend_id",
    "condition",
    "mer",
    "wer",
    "hits",
    "substitutions",
    "deletions",
    "insertions",
    "processing_time",
    "efficiency",
]
