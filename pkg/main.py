#!/usr/bin/env python3
"""
ASR Bench - メインスクリプト
コーパス準備 → 文字起こし → 採点 → 非流暢性評価 → レポート の各工程をサブコマンドで実行する

    python main.py filter-corpus --prompts arctic.data --wordlist ngsl.txt --k 100 --out prompts.txt
    python main.py transcribe --manifest manifest.json --backend deepgram --condition retained --out records.jsonl
    python main.py evaluate --records records.jsonl --manifest manifest.json --out report.json
    python main.py evaluate --reference-dir ref/ --hypothesis deepgram=hyp/deepgram --out report.json
    python main.py report --records records.jsonl --format csv --out report.csv

終了コード: 0 = 成功、1 = 個別レコードの失敗あり、2 = 設定・入力エラー、130 = 中断
"""

import argparse
import json
import logging
import os
import sys
import tempfile
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from config import (
    CACHE_DIR,
    CONDITIONS,
    DEBUG,
    DEFAULT_FILLER_TOKENS,
    DEFAULT_MAX_CONCURRENCY,
    DEFAULT_SEED,
    DEFAULT_TIMEOUT_S,
    LIVE_BACKENDS,
    OUTPUT_RECORDS,
    OUTPUT_REPORT,
)
from modules.backends import BackendConfig, check_credentials, run_batch
from modules.corpus import Recording, Speaker, filter_sentences, load_manifest, load_prompts, load_wordlist, sample
from modules.disfluency import RevisionSpan, load_annotations
from modules.errors import AsrBenchError, ConfigurationError
from modules.file_handler import find_transcript_files, load_json_file, read_text_file, recording_id_from_filename
from modules.log import setup_logging
from modules.report import EvaluationRecord, build_report, read_records, score_transcript, write_records
from modules.report_exporter import FORMATS, print_summary, write_report
from modules.textnorm import NormalizationConfig, RawTranscript, normalize

_LOGGER = logging.getLogger("asrbench")

EXIT_OK = 0
EXIT_RECORD_FAILURES = 1
EXIT_CONFIG_ERROR = 2
EXIT_INTERRUPTED = 130

# 設定ファイル [asrbench] テーブルで指定できるキー
CONFIG_FILE_KEYS = (
    "cache_dir", "seed", "max_concurrency", "condition", "backend",
    "filler_tokens", "keep_digits", "digit_map", "initial_prompt", "timeout",
)


@dataclass
class CliConfig:
    """フラグ > 設定ファイル > config.py の順で解決した実行設定"""

    command: str
    manifest_path: Optional[str] = None
    backends: List[str] = field(default_factory=list)
    conditions: List[str] = field(default_factory=lambda: list(CONDITIONS))
    cache_dir: str = CACHE_DIR
    out: Optional[str] = None
    output_format: str = "json"
    seed: int = DEFAULT_SEED
    wordlist_path: Optional[str] = None
    prompts_path: Optional[str] = None
    k: int = 100
    annotations_path: Optional[str] = None
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    timeout: float = DEFAULT_TIMEOUT_S
    initial_prompt: Optional[str] = None
    filler_tokens: List[str] = field(default_factory=lambda: list(DEFAULT_FILLER_TOKENS))
    digit_map: Optional[Dict[str, str]] = None
    records_path: Optional[str] = None
    records_out: Optional[str] = None
    reference_dir: Optional[str] = None
    hypotheses: List[str] = field(default_factory=list)
    debug: bool = DEBUG

    def normalization(self) -> NormalizationConfig:
        return NormalizationConfig(
            digit_word_map=self.digit_map,
            filler_tokens=frozenset(self.filler_tokens),
        )

    def digest_settings(self) -> Dict[str, Any]:
        """レポートの config_digest に使う設定（パスは含めない）"""
        return {
            "backends": sorted(self.backends),
            "conditions": sorted(self.conditions),
            "filler_tokens": sorted(self.filler_tokens),
            "digit_map": self.digit_map,
            "initial_prompt": self.initial_prompt,
            "seed": self.seed,
        }

    def validate(self) -> None:
        """処理を始める前にフラグの組み合わせを検証する"""
        bad = [c for c in self.conditions if c not in CONDITIONS]
        if bad or not self.conditions:
            raise ConfigurationError(f"condition は {CONDITIONS} から選びます: {self.conditions}")
        if self.output_format not in FORMATS:
            raise ConfigurationError(f"format は {FORMATS} のいずれかです: {self.output_format}")

        if self.command == "filter-corpus":
            if not (self.prompts_path and self.wordlist_path and self.out):
                raise ConfigurationError("filter-corpus には --prompts, --wordlist, --out が必要です")
        elif self.command == "transcribe":
            if not self.manifest_path:
                raise ConfigurationError("transcribe には --manifest が必要です")
            if not self.backends:
                raise ConfigurationError("transcribe には --backend が1つ以上必要です")
        elif self.command == "evaluate":
            if bool(self.records_path) == bool(self.reference_dir):
                raise ConfigurationError("evaluate には --records と --reference-dir のどちらか一方を指定します")
            if self.records_path and not self.manifest_path:
                raise ConfigurationError("--records で評価するときは --manifest が必要です")
            if self.reference_dir and not self.hypotheses:
                raise ConfigurationError("--reference-dir には --hypothesis が1つ以上必要です")
        elif self.command == "report":
            if not self.records_path:
                raise ConfigurationError("report には --records が必要です")


# ---------------------------------------------------------------------------
# 設定の解決
# ---------------------------------------------------------------------------

def load_config_file(path: str) -> Dict[str, Any]:
    """TOML 設定ファイルの [asrbench] テーブルを読む"""
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigurationError(f"設定ファイルを読み込めません: {path} ({e})") from e
    section = data.get("asrbench", {})
    if not isinstance(section, dict):
        raise ConfigurationError(f"[asrbench] テーブルが不正です: {path}")
    unknown = sorted(set(section) - set(CONFIG_FILE_KEYS))
    if unknown:
        raise ConfigurationError(f"設定ファイルの未知のキー: {unknown}")
    return section


def _as_list(value) -> List[str]:
    if value is None:
        return []
    return [value] if isinstance(value, str) else list(value)


def _load_digit_map(value) -> Optional[Dict[str, str]]:
    if value is None or isinstance(value, dict):
        return value
    data = load_json_file(value)
    if not isinstance(data, dict):
        raise ConfigurationError(f"数字→単語の対応表を読み込めません: {value}")
    return {str(k): str(v) for k, v in data.items()}


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """フラグ > 設定ファイル > 既定値 の順で CliConfig を組み立てる"""
    file_values = load_config_file(args.config) if args.config else {}

    def pick(flag_value, key, default):
        if flag_value not in (None, []):
            return flag_value
        if key in file_values:
            return file_values[key]
        return default

    if args.keep_digits:
        digit_map = None
    elif args.digit_map:
        digit_map = _load_digit_map(args.digit_map)
    elif file_values.get("keep_digits"):
        digit_map = None
    else:
        digit_map = _load_digit_map(file_values.get("digit_map"))

    config = CliConfig(
        command=args.command,
        manifest_path=args.manifest,
        backends=_as_list(pick(args.backend, "backend", [])),
        conditions=_as_list(pick(args.condition, "condition", list(CONDITIONS))),
        cache_dir=pick(args.cache_dir, "cache_dir", CACHE_DIR),
        out=args.out,
        output_format=args.format,
        seed=int(pick(args.seed, "seed", DEFAULT_SEED)),
        wordlist_path=args.wordlist,
        prompts_path=getattr(args, "prompts", None),
        k=getattr(args, "k", 100),
        annotations_path=args.annotations,
        max_concurrency=int(pick(args.max_concurrency, "max_concurrency", DEFAULT_MAX_CONCURRENCY)),
        timeout=float(pick(args.timeout, "timeout", DEFAULT_TIMEOUT_S)),
        initial_prompt=pick(args.initial_prompt, "initial_prompt", None),
        filler_tokens=_as_list(pick(args.filler_token, "filler_tokens", list(DEFAULT_FILLER_TOKENS))),
        digit_map=digit_map,
        records_path=getattr(args, "records", None),
        records_out=getattr(args, "records_out", None),
        reference_dir=getattr(args, "reference_dir", None),
        hypotheses=getattr(args, "hypothesis", None) or [],
        debug=bool(args.debug or DEBUG),
    )
    config.validate()
    return config


def build_backend_configs(config: CliConfig) -> List[BackendConfig]:
    """
    --backend の指定をバックエンド設定に展開する（条件ごとに1つ）。
    Note:
        "replay:<vendor>" は保存済みレスポンスを返すオフラインバックエンド。
    """
    configs = []
    for entry in config.backends:
        backend_id, _, replay_of = entry.partition(":")
        vendor = replay_of if backend_id == "replay" else backend_id
        prompt = config.initial_prompt if vendor == "whisper_replicate" else None
        for condition in config.conditions:
            overrides: Dict[str, Any] = {
                "cache_dir": config.cache_dir,
                "max_concurrency": config.max_concurrency,
                "timeout": config.timeout,
                "initial_prompt": prompt,
            }
            if backend_id == "replay":
                overrides["replay_of"] = replay_of or None
            elif replay_of:
                raise ConfigurationError(f"':' は replay:<vendor> の形でのみ使えます: {entry}")
            configs.append(BackendConfig.from_defaults(backend_id, condition, **overrides))
    return configs


# ---------------------------------------------------------------------------
# 共通処理
# ---------------------------------------------------------------------------

def _annotation_spans(config: CliConfig, recording_id: str, reference_length: int) -> List[RevisionSpan]:
    """録音IDに対応するリビジョンのアノテーションを読む（無ければ空）"""
    if not config.annotations_path:
        return []
    base = Path(config.annotations_path)
    path = base / f"{recording_id}.json" if base.is_dir() else base
    if not path.is_file() or (not base.is_dir() and base.stem != recording_id):
        return []
    return load_annotations(path, reference_length=reference_length)


def _score(
    config: CliConfig,
    reference_text: str,
    hypothesis_text: Optional[str],
    *,
    recording_id: str,
    backend_id: str,
    condition: str,
    speaker: Optional[Speaker],
    speech_type: Optional[str],
    processing_time: Optional[float] = None,
    retried: bool = False,
    captured_at: Optional[str] = None,
) -> EvaluationRecord:
    norm = config.normalization()
    reference_length = len(normalize(RawTranscript(reference_text), norm))
    return score_transcript(
        reference_text,
        hypothesis_text,
        recording_id=recording_id,
        backend_id=backend_id,
        condition=condition,
        speaker=speaker,
        speech_type=speech_type,
        processing_time=processing_time,
        spans=_annotation_spans(config, recording_id, reference_length),
        config=norm,
        retried=retried,
        captured_at=captured_at,
    )


def _read_reference(path: Optional[str], recording_id: str) -> Optional[str]:
    text = read_text_file(path) if path else None
    if text is None:
        _LOGGER.warning("参照書き起こしを読み込めません: %s", path, extra={"recording_id": recording_id})
    return text


def _emit_report(config: CliConfig, records: Sequence[EvaluationRecord], failures: int, started: float) -> int:
    doc = build_report(records, settings=config.digest_settings())
    output_file = config.out or OUTPUT_REPORT
    write_report(doc, output_file, config.output_format)
    if config.records_out:
        write_records(records, config.records_out)
    print_summary(doc, output_file, failures=failures)
    print(f"\n⏱️ 処理時間: {time.perf_counter() - started:.2f}秒", file=sys.stderr)
    return EXIT_RECORD_FAILURES if failures else EXIT_OK


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------

def cmd_filter_corpus(config: CliConfig) -> int:
    """ワードリストで文を絞り込み、シード付きで k 文を抽出して1行1文で書き出す"""
    prompts = load_prompts(config.prompts_path)
    wordlist = load_wordlist(config.wordlist_path)
    kept = filter_sentences(prompts, wordlist)
    chosen = sample(kept, config.k, config.seed)

    # 途中で失敗しても中途半端なファイルを残さない
    out = Path(config.out)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            for sentence in chosen:
                f.write(sentence + "\n")
        os.replace(tmp, out)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise

    print(f"✅ {len(kept)} 文から {len(chosen)} 文を抽出: {out}", file=sys.stderr)
    return EXIT_OK


def cmd_transcribe(config: CliConfig) -> int:
    """マニフェストの全録音を指定バックエンド×条件で文字起こしし、評価レコードを追記する"""
    started = time.perf_counter()
    speakers, recordings = load_manifest(config.manifest_path)
    backend_configs = build_backend_configs(config)
    check_credentials(backend_configs)

    by_id: Dict[str, Recording] = {r.recording_id: r for r in recordings}
    out = config.out or OUTPUT_RECORDS
    written = failures = 0

    for result in run_batch(backend_configs, recordings):
        if not result.ok:
            failures += 1
            continue
        recording = by_id[result.recording_id]
        speaker = speakers[recording.speaker_id]
        retried = bool(result.request_metadata.get("retried"))
        captured_at = result.request_metadata.get("captured_at")
        record = None
        if recording.reference_path:
            reference_text = _read_reference(recording.reference_path, recording.recording_id)
            if reference_text is None:
                failures += 1
                continue
            try:
                record = _score(
                    config, reference_text, result.raw_text,
                    recording_id=recording.recording_id,
                    backend_id=result.backend_id,
                    condition=result.condition,
                    speaker=speaker,
                    speech_type=recording.speech_type,
                    processing_time=result.processing_time,
                    retried=retried,
                    captured_at=captured_at,
                )
            except AsrBenchError as e:
                _LOGGER.warning("採点できません: %s", e, extra={"recording_id": recording.recording_id})
                failures += 1
                continue
        if record is None:
            record = EvaluationRecord(
                recording_id=recording.recording_id,
                speaker_id=speaker.id,
                backend_id=result.backend_id,
                condition=result.condition,
                l1=speaker.l1,
                gender=speaker.gender,
                speech_type=recording.speech_type,
                processing_time=result.processing_time,
                raw_text=result.raw_text,
                retried=retried,
                captured_at=captured_at,
            )
        written += write_records([record], out)

    print(f"\n✅ 文字起こし完了: {written} 件を {out} に出力", file=sys.stderr)
    if failures:
        print(f"⚠️ 失敗: {failures} 件", file=sys.stderr)
    print(f"⏱️ 処理時間: {time.perf_counter() - started:.2f}秒", file=sys.stderr)
    return EXIT_RECORD_FAILURES if failures else EXIT_OK


def _parse_hypothesis(value: str) -> Tuple[str, Optional[str], str]:
    """'backend[:condition]=DIR' を分解する"""
    name, sep, directory = value.partition("=")
    if not sep or not name or not directory:
        raise ConfigurationError(f"--hypothesis は backend[:condition]=DIR の形式です: {value}")
    backend_id, _, condition = name.partition(":")
    if condition and condition not in CONDITIONS:
        raise ConfigurationError(f"条件は {CONDITIONS} のいずれかです: {value}")
    return backend_id, condition or None, directory


def _evaluate_pairs(config: CliConfig, manifest) -> Tuple[List[EvaluationRecord], int]:
    speakers, recordings = manifest
    by_id = {r.recording_id: r for r in recordings}
    references = {recording_id_from_filename(p): p for p in find_transcript_files(config.reference_dir)}
    if not references:
        raise ConfigurationError(f"参照書き起こしが見つかりません: {config.reference_dir}")

    default_condition = config.conditions[0] if len(config.conditions) == 1 else "retained"
    records: List[EvaluationRecord] = []
    failures = 0
    for value in config.hypotheses:
        backend_id, condition, directory = _parse_hypothesis(value)
        condition = condition or default_condition
        for recording_id, ref_path in sorted(references.items()):
            recording = by_id.get(recording_id)
            speaker = speakers.get(recording.speaker_id) if recording else None
            reference_text = _read_reference(ref_path, recording_id)
            hyp_path = Path(directory) / Path(ref_path).name
            hypothesis_text = read_text_file(hyp_path) if hyp_path.is_file() else None
            if reference_text is None or hypothesis_text is None:
                if hypothesis_text is None:
                    _LOGGER.warning("仮説書き起こしがありません: %s", hyp_path, extra={"recording_id": recording_id})
                failures += 1
                continue
            try:
                records.append(_score(
                    config, reference_text, hypothesis_text,
                    recording_id=recording_id,
                    backend_id=backend_id,
                    condition=condition,
                    speaker=speaker,
                    speech_type=recording.speech_type if recording else None,
                ))
            except AsrBenchError as e:
                _LOGGER.warning("採点できません: %s", e, extra={"recording_id": recording_id})
                failures += 1
    return records, failures


def _evaluate_records(config: CliConfig, manifest) -> Tuple[List[EvaluationRecord], int]:
    speakers, recordings = manifest
    by_id = {r.recording_id: r for r in recordings}
    records: List[EvaluationRecord] = []
    failures = 0
    for stored in read_records(config.records_path):
        recording = by_id.get(stored.recording_id)
        if recording is None or not recording.reference_path:
            _LOGGER.warning("マニフェストに参照がありません", extra={"recording_id": stored.recording_id})
            failures += 1
            continue
        reference_text = _read_reference(recording.reference_path, stored.recording_id)
        if reference_text is None:
            failures += 1
            continue
        try:
            records.append(_score(
                config, reference_text, stored.raw_text,
                recording_id=stored.recording_id,
                backend_id=stored.backend_id,
                condition=stored.condition,
                speaker=speakers[recording.speaker_id],
                speech_type=recording.speech_type,
                processing_time=stored.processing_time,
                retried=stored.retried,
                captured_at=stored.captured_at,
            ))
        except AsrBenchError as e:
            _LOGGER.warning("採点できません: %s", e, extra={"recording_id": stored.recording_id})
            failures += 1
    return records, failures


def cmd_evaluate(config: CliConfig) -> int:
    """参照と仮説を採点してレポートを書き出す"""
    started = time.perf_counter()
    manifest = load_manifest(config.manifest_path) if config.manifest_path else ({}, [])
    if config.records_path:
        records, failures = _evaluate_records(config, manifest)
    else:
        records, failures = _evaluate_pairs(config, manifest)
    _LOGGER.info("採点完了: %d 件、失敗 %d 件", len(records), failures)
    return _emit_report(config, records, failures, started)


def cmd_report(config: CliConfig) -> int:
    """記録済みの評価レコードからレポートだけを作り直す（再採点しない）"""
    started = time.perf_counter()
    records = read_records(config.records_path)
    return _emit_report(config, records, 0, started)


COMMANDS = {
    "filter-corpus": cmd_filter_corpus,
    "transcribe": cmd_transcribe,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML 設定ファイル（[asrbench] テーブル）")
    common.add_argument("--debug", action="store_true", help="DEBUG ログを出す")
    common.add_argument("--manifest", help="話者・録音のマニフェスト (JSON)")
    common.add_argument("--backend", action="append",
                        help=f"バックエンド（複数可）: {', '.join(LIVE_BACKENDS)} または replay:<vendor>")
    common.add_argument("--condition", action="append", choices=CONDITIONS, help="非流暢性条件（複数可、既定は両方）")
    common.add_argument("--cache-dir", help="レスポンスキャッシュのディレクトリ")
    common.add_argument("--out", help="出力ファイル")
    common.add_argument("--format", choices=FORMATS, default="json", help="レポートの形式")
    common.add_argument("--seed", type=int, help="乱数シード")
    common.add_argument("--wordlist", help="ワードリスト（1行1語）")
    common.add_argument("--annotations", help="リビジョンのアノテーション（ディレクトリまたはJSON）")
    common.add_argument("--max-concurrency", type=int, help="バックエンドごとの同時リクエスト数")
    common.add_argument("--timeout", type=float, help="1リクエストの上限（秒）")
    common.add_argument("--initial-prompt", help="whisper_replicate の initial_prompt（retained 条件のみ）")
    common.add_argument("--filler-token", action="append", help="フィラーとして数える語（複数可）")
    digits = common.add_mutually_exclusive_group()
    digits.add_argument("--keep-digits", action="store_true", default=None, help="数字をそのまま残す（既定）")
    digits.add_argument("--digit-map", help="数字→単語の対応表 (JSON)")

    parser = argparse.ArgumentParser(description="ASR Bench - 音声認識の評価ツール")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter-corpus", parents=[common], help="ワードリストで文を絞り込んで抽出")
    p.add_argument("--prompts", help="プロンプト文（1行1文またはARCTIC形式）")
    p.add_argument("--k", type=int, default=100, help="抽出する文の数")

    sub.add_parser("transcribe", parents=[common], help="録音を文字起こしして評価レコードを出力")

    p = sub.add_parser("evaluate", parents=[common], help="採点してレポートを出力")
    p.add_argument("--records", help="transcribe が出力した評価レコード (JSON Lines)")
    p.add_argument("--reference-dir", help="参照書き起こしのディレクトリ (<recording_id>.txt)")
    p.add_argument("--hypothesis", action="append", help="backend[:condition]=DIR（複数可）")
    p.add_argument("--records-out", help="採点済みレコードの出力先 (JSON Lines)")

    p = sub.add_parser("report", parents=[common], help="評価レコードからレポートを作り直す")
    p.add_argument("--records", help="評価レコード (JSON Lines)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン処理"""
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(debug=bool(args.debug or DEBUG))

    try:
        config = resolve_config(args)
        _LOGGER.debug("設定: %s", json.dumps(asdict(config), ensure_ascii=False, default=str))
        return COMMANDS[config.command](config)
    except KeyboardInterrupt:
        print("\n\n🛑 処理が中断されました", file=sys.stderr)
        return EXIT_INTERRUPTED
    except (AsrBenchError, OSError, ValueError) as e:
        print(f"\n❌ {e}", file=sys.stderr)
        if DEBUG or args.debug:
            _LOGGER.exception("エラーの詳細")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
