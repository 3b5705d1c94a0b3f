//! Prompt assembly, answer generation and the pairwise LLM-as-judge protocol.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::shorten::StrategyKind;

pub const QA_INSTRUCTION: &str = "Answer the question based on the given context.";
pub const QUESTION_HEADER: &str = "##Question";
pub const CONTEXT_HEADER: &str = "##Context";
pub const ANSWER_HEADER: &str = "##Answer";

pub const JUDGE_INSTRUCTION: &str = "Given the following question, you are given a ground-truth answer and two options. Choose the option that is closest to the ground truth. You are only allowed to choose one option. Print either \"option1\" or \"option2\". Print nothing else.";
pub const GROUND_TRUTH_HEADER: &str = "##Ground_Truth:";
pub const OPTION1_HEADER: &str = "##Option1:";
pub const OPTION2_HEADER: &str = "##Option2:";

pub const DEFAULT_TEMPERATURE: f64 = 0.001;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("context is empty")]
    EmptyContext,
    #[error("judge prompt field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("context too long for model `{0}`")]
    ContextTooLong(String),
    #[error("could not parse judge verdict from {0:?}")]
    UnparseableVerdict(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Backend(BackendError),
}

impl From<BackendError> for GenError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::ContextTooLong { model_id, .. } => GenError::ContextTooLong(model_id),
            other => GenError::Backend(other),
        }
    }
}

/// Builds the QA prompt. Without an answer this is the inference prompt,
/// which ends right after the `##Answer` cue line.
pub fn build_qa_prompt(question: &str, context: &str, answer: Option<&str>) -> Result<String, GenError> {
    if question.trim().is_empty() {
        return Err(GenError::EmptyQuestion);
    }
    if context.trim().is_empty() {
        return Err(GenError::EmptyContext);
    }
    let mut prompt = format!(
        "{QA_INSTRUCTION}\n{QUESTION_HEADER}\n{question}\n{CONTEXT_HEADER}\n{context}\n{ANSWER_HEADER}\n"
    );
    if let Some(a) = answer {
        prompt.push_str(a);
    }
    Ok(prompt)
}

pub fn build_judge_prompt(
    question: &str,
    ground_truth: &str,
    option1: &str,
    option2: &str,
) -> Result<String, GenError> {
    for (name, value) in [
        ("question", question),
        ("ground_truth", ground_truth),
        ("option1", option1),
        ("option2", option2),
    ] {
        if value.trim().is_empty() {
            return Err(GenError::EmptyField(name));
        }
    }
    Ok(format!(
        "{JUDGE_INSTRUCTION}\n{QUESTION_HEADER}\n{question}\n{GROUND_TRUTH_HEADER}\n{ground_truth}\n{OPTION1_HEADER}\n{option1}\n{OPTION2_HEADER}\n{option2}"
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.temperature > 0.0) {
            return Err(GenError::InvalidRequest("temperature must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(GenError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub latency_secs: f64,
}

/// Runs one completion and records its wall-clock latency.
pub fn generate(req: &GenerationRequest, backend: &dyn Backend) -> Result<Generation, GenError> {
    req.validate()?;
    let started = Instant::now();
    let text = backend.generate(req)?;
    Ok(Generation {
        text,
        latency_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeOption {
    Option1,
    Option2,
}

impl fmt::Display for JudgeOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeOption::Option1 => "option1",
            JudgeOption::Option2 => "option2",
        })
    }
}

/// Trims, then tries a case-insensitive exact match, then a unique substring.
pub fn parse_judge_output(raw: &str) -> Result<JudgeOption, GenError> {
    let lowered = raw.trim().to_lowercase();
    match lowered.as_str() {
        "option1" => return Ok(JudgeOption::Option1),
        "option2" => return Ok(JudgeOption::Option2),
        _ => {}
    }
    match (lowered.contains("option1"), lowered.contains("option2")) {
        (true, false) => Ok(JudgeOption::Option1),
        (false, true) => Ok(JudgeOption::Option2),
        _ => Err(GenError::UnparseableVerdict(raw.to_string())),
    }
}

/// One answer entered into a pairwise comparison.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub answer: &'a str,
    pub strategy: StrategyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub winner: JudgeOption,
    pub option1_source: StrategyKind,
    pub option2_source: StrategyKind,
    pub raw_reply: String,
    pub tie_inputs: bool,
}

impl JudgeVerdict {
    /// True when the first candidate passed to [`Judge::judge`] won.
    pub fn first_won(&self, item_index: usize) -> bool {
        let first_is_option1 = item_index % 2 == 0;
        (self.winner == JudgeOption::Option1) == first_is_option1
    }

    pub fn winner_source(&self) -> StrategyKind {
        match self.winner {
            JudgeOption::Option1 => self.option1_source,
            JudgeOption::Option2 => self.option2_source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    /// The verdict, or the reply that could not be parsed.
    pub verdict: Result<JudgeVerdict, String>,
    pub prompt: String,
}

/// A judge model behind a backend.
#[derive(Clone, Copy)]
pub struct Judge<'a> {
    pub backend: &'a dyn Backend,
    pub model_id: &'a str,
    pub seed: u64,
}

impl Judge<'_> {
    /// Asks which candidate is closer to the ground truth.
    ///
    /// Even `item_index` presents `x` as option1, odd presents `y` first.
    pub fn judge(
        &self,
        question: &str,
        ground_truth: &str,
        x: Candidate<'_>,
        y: Candidate<'_>,
        item_index: usize,
    ) -> Result<JudgeOutcome, GenError> {
        let (first, second) = if item_index % 2 == 0 { (x, y) } else { (y, x) };
        let prompt = build_judge_prompt(question, ground_truth, first.answer, second.answer)?;
        let mut req = GenerationRequest::new(self.model_id, prompt.clone(), self.seed);
        req.max_new_tokens = 8;
        let raw = self.backend.generate(&req)?;
        let verdict = match parse_judge_output(&raw) {
            Ok(winner) => Ok(JudgeVerdict {
                winner,
                option1_source: first.strategy,
                option2_source: second.strategy,
                raw_reply: raw,
                tie_inputs: x.answer.trim() == y.answer.trim(),
            }),
            Err(_) => Err(raw),
        };
        Ok(JudgeOutcome { verdict, prompt })
    }
}
