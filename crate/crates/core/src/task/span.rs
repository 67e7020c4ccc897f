use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Mispronunciation,
    AbnormalSilence,
    UnnaturalPause,
    Repetition,
    Truncation,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [
        ErrorKind::Mispronunciation,
        ErrorKind::AbnormalSilence,
        ErrorKind::UnnaturalPause,
        ErrorKind::Repetition,
        ErrorKind::Truncation,
    ];

    pub fn category(self) -> ErrorCategory {
        match self {
            ErrorKind::Mispronunciation | ErrorKind::AbnormalSilence | ErrorKind::UnnaturalPause => {
                ErrorCategory::Temporal
            }
            ErrorKind::Repetition | ErrorKind::Truncation => ErrorCategory::SemanticPhonetic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Mispronunciation => "mispronunciation",
            ErrorKind::AbnormalSilence => "abnormal_silence",
            ErrorKind::UnnaturalPause => "unnatural_pause",
            ErrorKind::Repetition => "repetition",
            ErrorKind::Truncation => "truncation",
        }
    }
}

impl std::fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown error kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Localized defects: only the span itself is wrong.
    Temporal,
    /// Defects that corrupt everything after their onset.
    SemanticPhonetic,
}

/// Half-open interval `[start, end)` of token positions in one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorSpan {
    pub start: usize,
    pub end: usize,
    pub kind: ErrorKind,
}

impl ErrorSpan {
    pub fn new(start: usize, end: usize, kind: ErrorKind) -> Self {
        Self { start, end, kind }
    }

    pub fn category(&self) -> ErrorCategory {
        self.kind.category()
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn is_valid_for(&self, seq_len: usize) -> bool {
        self.start < self.end && self.end <= seq_len
    }
}
