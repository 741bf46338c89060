//! Accuracy evaluation, the baseline suite, ablation sweeps and the latent
//! geometry analysis.

mod geometry;
mod suite;
mod svg;

pub use geometry::{collect_geometry, latent_geometry, pca_2d, GeometryPoint, GeometryReport, PointKind, Pca};
pub use suite::{
    ablation_cells, ablation_csv, ablation_sweep, baseline_csv, run_baseline_suite, AblationCell, AblationRow, BaselineRow,
    StageRemoval, SuiteConfig, SuiteData, SuiteResult,
};
pub use svg::{bar_chart_svg, scatter_svg, Bar, ScatterPoint};

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{decode, DecodeOptions, DecodeTrace, Model, Tokenizer};
use crate::scalar::Scalar;
use crate::taskgen::{map_from_image, parse_plan, simulate, Outcome, TaskKind, TrajectorySample};
use crate::train::prompt_layout;

const BOXED: &str = "\\boxed{";

/// Contents of the last `\boxed{...}` span, found by balanced-brace
/// scanning and trimmed. `None` when there is no complete span.
pub fn extract_answer(text: &str) -> Option<String> {
    let start = text.rfind(BOXED)? + BOXED.len();
    let mut depth = 1;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].trim().to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Whether `answer` solves `sample`. Reasoning and jigsaw answers are
/// compared to the gold letter; a plan is correct iff simulating it on the
/// input map reaches the goal.
pub fn answer_correct(sample: &TrajectorySample, answer: &str) -> bool {
    match sample.task {
        TaskKind::Reason | TaskKind::Jigsaw => answer.trim().eq_ignore_ascii_case(sample.answer.trim()),
        TaskKind::Plan => {
            let Some(actions) = parse_plan(answer) else { return false };
            match sample.input_images.first().map(map_from_image) {
                Some(Ok(map)) => simulate(&map, &actions).0 == Outcome::Success,
                _ => false,
            }
        }
    }
}

/// Scores one decoded response. Truncated decodes and responses without an
/// answer are incorrect.
pub fn score_response(sample: &TrajectorySample, response: &str, truncated: bool) -> bool {
    !truncated && extract_answer(response).is_some_and(|a| answer_correct(sample, &a))
}

/// Text of the generated part of a decode.
pub fn response_text(trace: &DecodeTrace) -> String {
    Tokenizer::standard().decode(&trace.generated_ids())
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LevelStats {
    pub n: usize,
    pub correct: usize,
    pub decode_failures: usize,
}

impl LevelStats {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// Per-level and overall accuracy. Overall is the n-weighted mean of the
/// levels.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EvalReport {
    pub levels: BTreeMap<usize, LevelStats>,
}

/// One scored response.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredResponse {
    pub level: usize,
    pub correct: bool,
    /// Truncated or no boxed answer.
    pub failed_decode: bool,
}

impl EvalReport {
    pub fn from_scores(scores: &[ScoredResponse]) -> Self {
        let mut levels: BTreeMap<usize, LevelStats> = BTreeMap::new();
        for s in scores {
            let e = levels.entry(s.level).or_default();
            e.n += 1;
            e.correct += s.correct as usize;
            e.decode_failures += s.failed_decode as usize;
        }
        EvalReport { levels }
    }

    pub fn n(&self) -> usize {
        self.levels.values().map(|l| l.n).sum()
    }

    pub fn decode_failures(&self) -> usize {
        self.levels.values().map(|l| l.decode_failures).sum()
    }

    pub fn overall(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            return 0.0;
        }
        self.levels.values().map(|l| l.correct).sum::<usize>() as f64 / n as f64
    }

    /// Accuracy over the given levels pooled together.
    pub fn accuracy_on(&self, levels: &[usize]) -> f64 {
        let (n, c) = self
            .levels
            .iter()
            .filter(|(l, _)| levels.contains(l))
            .fold((0, 0), |(n, c), (_, s)| (n + s.n, c + s.correct));
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,n,correct,accuracy,decode_failures\n");
        for (level, s) in &self.levels {
            out += &format!("{level},{},{},{},{}\n", s.n, s.correct, s.accuracy(), s.decode_failures);
        }
        out += &format!(
            "all,{},{},{},{}\n",
            self.n(),
            self.levels.values().map(|l| l.correct).sum::<usize>(),
            self.overall(),
            self.decode_failures()
        );
        out
    }
}

/// Scores ready-made responses, one per sample.
pub fn evaluate_responses(samples: &[TrajectorySample], responses: &[(String, bool)]) -> EvalReport {
    let scores: Vec<ScoredResponse> = samples
        .iter()
        .zip(responses)
        .map(|(s, (text, truncated))| ScoredResponse {
            level: s.level,
            correct: score_response(s, text, *truncated),
            failed_decode: *truncated || extract_answer(text).is_none(),
        })
        .collect();
    EvalReport::from_scores(&scores)
}

/// Greedy-decodes every sample's prompt and scores the answers.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[TrajectorySample]) -> Result<EvalReport> {
    let max_new = model.config.max_seq;
    let responses = samples
        .par_iter()
        .map(|s| {
            let trace = decode(model, &prompt_layout(s)?, &DecodeOptions::greedy(max_new))?;
            Ok((response_text(&trace), trace.truncated))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_responses(samples, &responses))
}
