# modules package: ASR評価（正規化・アライメント・指標・非流暢性・コーパス・文字起こし・統計・レポート）
